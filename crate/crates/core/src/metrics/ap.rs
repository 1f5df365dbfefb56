use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ImageEval, MetricError};
use crate::classes::ClassId;
use crate::geometry::iou;

pub const MAP_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub per_class: Vec<ClassAp>,
    /// Classes that had detections but no ground truth; they contribute no AP term.
    pub skipped_classes: Vec<ClassId>,
}

/// All-points interpolated AP from a ranked true-positive sequence.
///
/// Precision is replaced by its running maximum from the right, then summed at
/// each recall step (every true positive moves recall by `1 / num_gt`).
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = ranked_tp
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            if hit {
                tp += 1;
            }
            tp as f64 / (k + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let sum: f64 = ranked_tp
        .iter()
        .zip(&envelope)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| *p)
        .sum();
    sum / num_gt as f64
}

/// Mean average precision at IoU 0.5 over classes with at least one ground truth.
pub fn map50(images: &[ImageEval]) -> Result<MapResult, MetricError> {
    let gt_classes: BTreeSet<ClassId> = images
        .iter()
        .flat_map(|im| im.ground_truths.iter().map(|g| g.class_id))
        .collect();
    if gt_classes.is_empty() {
        return Err(MetricError::EmptyInput("no ground-truth boxes for mAP"));
    }
    let skipped_classes: Vec<ClassId> = images
        .iter()
        .flat_map(|im| im.predictions.iter().map(|p| p.class_id))
        .filter(|c| !gt_classes.contains(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut per_class = Vec::with_capacity(gt_classes.len());
    for class in gt_classes {
        let mut ranked: Vec<(usize, usize, f64)> = images
            .iter()
            .enumerate()
            .flat_map(|(ii, im)| {
                im.predictions
                    .iter()
                    .enumerate()
                    .filter(move |(_, p)| p.class_id == class)
                    .map(move |(di, p)| (ii, di, p.score))
            })
            .collect();
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

        let mut taken: BTreeMap<(usize, usize), ()> = BTreeMap::new();
        let mut flags = Vec::with_capacity(ranked.len());
        for &(ii, di, _) in &ranked {
            let im = &images[ii];
            let pred = &im.predictions[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in im.ground_truths.iter().enumerate() {
                if g.class_id != class || taken.contains_key(&(ii, gi)) {
                    continue;
                }
                let v = iou(&pred.bbox, &g.bbox);
                if v >= MAP_IOU && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken.insert((ii, gi), ());
            }
            flags.push(best.is_some());
        }
        let num_gt = images
            .iter()
            .flat_map(|im| im.ground_truths.iter())
            .filter(|g| g.class_id == class)
            .count();
        per_class.push(ClassAp {
            class_id: class,
            ap: average_precision(&flags, num_gt),
            num_gt,
            num_detections: ranked.len(),
        });
    }
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapResult {
        map,
        per_class,
        skipped_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Detection, GroundTruth};

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    #[test]
    fn single_exact_detection() {
        let im = ImageEval {
            image_id: 1,
            predictions: vec![Detection::new(bx(0.0), ClassId(1), 0.4).unwrap()],
            ground_truths: vec![GroundTruth::new(bx(0.0), ClassId(1))],
        };
        assert_eq!(map50(&[im]).unwrap().map, 1.0);
    }

    #[test]
    fn hand_traced_pr_curve() {
        // GTs at x=0 and x=100; detections .9 hits, .8 misses, .7 hits.
        let im = ImageEval {
            image_id: 1,
            predictions: vec![
                Detection::new(bx(0.0), ClassId(1), 0.9).unwrap(),
                Detection::new(bx(50.0), ClassId(1), 0.8).unwrap(),
                Detection::new(bx(100.0), ClassId(1), 0.7).unwrap(),
            ],
            ground_truths: vec![
                GroundTruth::new(bx(0.0), ClassId(1)),
                GroundTruth::new(bx(100.0), ClassId(1)),
            ],
        };
        let r = map50(&[im]).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_detections_and_skips() {
        let im = ImageEval {
            image_id: 1,
            predictions: vec![Detection::new(bx(0.0), ClassId(5), 0.9).unwrap()],
            ground_truths: vec![GroundTruth::new(bx(0.0), ClassId(1))],
        };
        let r = map50(&[im]).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.skipped_classes, vec![ClassId(5)]);
        assert!(map50(&[]).is_err());
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let im = ImageEval {
            image_id: 1,
            predictions: vec![
                Detection::new(bx(0.0), ClassId(1), 0.9).unwrap(),
                Detection::new(bx(0.0), ClassId(1), 0.8).unwrap(),
            ],
            ground_truths: vec![GroundTruth::new(bx(0.0), ClassId(1))],
        };
        assert_eq!(map50(&[im]).unwrap().map, 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
    }
}
