//! Small synthetic evaluation sets with known answers, for smoke tests and
//! demos of the evaluation path.

use crate::classes::{ClassRegistry, OIL_SPILL};
use crate::dataset::{CocoAnnotation, CocoDataset, CocoImage};
use crate::vlm::{ReplayEntry, ReplayLog};

const W: u32 = 800;
const H: u32 = 600;
const GT: [f64; 4] = [100.0, 120.0, 100.0, 80.0];

/// Ten 800x600 images, one oil-spill box each. The matching replay log
/// answers seven of them exactly and misplaces the other three (IoU 1/3),
/// so the hit-rate at IoU 0.5 is 0.70.
pub fn seven_of_ten() -> (CocoDataset, ReplayLog) {
    let classes = ClassRegistry::default();
    let mut ds = CocoDataset {
        categories: CocoDataset::categories_from(&classes),
        ..Default::default()
    };
    let mut log = Vec::new();
    for i in 1..=10u64 {
        ds.images.push(CocoImage {
            id: i,
            file_name: format!("frame_{i:03}.png"),
            width: W,
            height: H,
            extra: Default::default(),
        });
        ds.annotations.push(CocoAnnotation {
            id: Some(i),
            image_id: i,
            category_id: OIL_SPILL,
            bbox: GT,
            score: None,
            extra: Default::default(),
        });
        let x = if i <= 7 { GT[0] } else { GT[0] + 50.0 };
        let reply = format!(
            "{{\"image_id\": {i}, \"category_id\": {}, \"bbox\": [{x}, {}, {}, {}], \"score\": 0.9}}",
            OIL_SPILL.0, GT[1], GT[2], GT[3]
        );
        log.push(ReplayEntry {
            image_id: i,
            class_id: OIL_SPILL,
            request: None,
            response_text: Some(reply),
            error: None,
        });
    }
    (ds, ReplayLog::from_entries(log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{iou, BBox};

    #[test]
    fn misses_sit_below_half() {
        let gt = BBox::from_xywh(GT[0], GT[1], GT[2], GT[3]).unwrap();
        let miss = BBox::from_xywh(GT[0] + 50.0, GT[1], GT[2], GT[3]).unwrap();
        assert!((iou(&gt, &miss) - 1.0 / 3.0).abs() < 1e-12);
        let (ds, log) = seven_of_ten();
        assert_eq!((ds.images.len(), log.len()), (10, 10));
    }
}
