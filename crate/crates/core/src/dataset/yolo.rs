use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CocoDataset, DatasetError};

/// One YOLO label line: class index and centre/size normalised to the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoloRecord {
    pub class_idx: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl YoloRecord {
    pub fn new(class_idx: usize, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, DatasetError> {
        let v = [cx, cy, w, h];
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(DatasetError::Range(v));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(DatasetError::DegenerateBox { bbox: v });
        }
        Ok(Self {
            class_idx,
            cx,
            cy,
            w,
            h,
        })
    }
}

fn check_dims(w: f64, h: f64) -> Result<(), DatasetError> {
    if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() {
        Ok(())
    } else {
        Err(DatasetError::BadDimensions(w, h))
    }
}

pub fn coco_to_yolo(
    bbox: [f64; 4],
    class_idx: usize,
    image_w: f64,
    image_h: f64,
) -> Result<YoloRecord, DatasetError> {
    check_dims(image_w, image_h)?;
    let [x, y, w, h] = bbox;
    if !(w > 0.0 && h > 0.0) {
        return Err(DatasetError::DegenerateBox { bbox });
    }
    YoloRecord::new(
        class_idx,
        (x + w / 2.0) / image_w,
        (y + h / 2.0) / image_h,
        w / image_w,
        h / image_h,
    )
}

pub fn yolo_to_coco(rec: &YoloRecord, image_w: f64, image_h: f64) -> Result<[f64; 4], DatasetError> {
    check_dims(image_w, image_h)?;
    let rec = YoloRecord::new(rec.class_idx, rec.cx, rec.cy, rec.w, rec.h)?;
    let w = rec.w * image_w;
    let h = rec.h * image_h;
    Ok([rec.cx * image_w - w / 2.0, rec.cy * image_h - h / 2.0, w, h])
}

/// Parses a YOLO label file: one `class cx cy w h` record per non-blank line.
pub fn parse_yolo(text: &str) -> Result<Vec<YoloRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| DatasetError::YoloLine {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_idx: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class index '{}'", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number '{f}'")))?;
        }
        out.push(YoloRecord::new(class_idx, v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn format_yolo(records: &[YoloRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{} {} {} {} {}\n", r.class_idx, r.cx, r.cy, r.w, r.h))
        .collect()
}

/// Label file contents keyed by `<image stem>.txt`. Class indices follow the
/// dataset's category order sorted by id.
pub fn coco_dataset_to_yolo(ds: &CocoDataset) -> Result<BTreeMap<String, String>, DatasetError> {
    let mut cats: Vec<_> = ds.categories.iter().map(|c| c.id).collect();
    cats.sort();
    let mut out = BTreeMap::new();
    for img in &ds.images {
        let mut recs = Vec::new();
        for a in ds.annotations.iter().filter(|a| a.image_id == img.id) {
            let idx = cats
                .iter()
                .position(|c| *c == a.category_id)
                .ok_or(DatasetError::UnknownClassIndex(a.category_id.0 as usize))?;
            recs.push(coco_to_yolo(a.bbox, idx, img.width as f64, img.height as f64)?);
        }
        let stem = Path::new(&img.file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| img.id.to_string());
        out.insert(format!("{stem}.txt"), format_yolo(&recs));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_conversion() {
        let r = coco_to_yolo([10.0, 20.0, 30.0, 40.0], 0, 100.0, 100.0).unwrap();
        assert_eq!((r.cx, r.cy, r.w, r.h), (0.25, 0.40, 0.30, 0.40));
        let back = yolo_to_coco(&r, 100.0, 100.0).unwrap();
        for (a, b) in back.iter().zip([10.0, 20.0, 30.0, 40.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn full_image() {
        let r = coco_to_yolo([0.0, 0.0, 640.0, 480.0], 2, 640.0, 480.0).unwrap();
        assert_eq!((r.cx, r.cy, r.w, r.h), (0.5, 0.5, 1.0, 1.0));
        let back = yolo_to_coco(&YoloRecord::new(0, 0.5, 0.5, 1.0, 1.0).unwrap(), 640.0, 480.0);
        assert_eq!(back.unwrap(), [0.0, 0.0, 640.0, 480.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            coco_to_yolo([0.0, 0.0, 0.0, 10.0], 0, 100.0, 100.0),
            Err(DatasetError::DegenerateBox { .. })
        ));
        let bad = YoloRecord {
            class_idx: 0,
            cx: 1.2,
            cy: 0.5,
            w: 0.1,
            h: 0.1,
        };
        assert!(matches!(yolo_to_coco(&bad, 10.0, 10.0), Err(DatasetError::Range(_))));
        assert!(coco_to_yolo([0.0, 0.0, 1.0, 1.0], 0, 0.0, 10.0).is_err());
    }

    #[test]
    fn text_format() {
        let recs = vec![
            YoloRecord::new(0, 0.25, 0.4, 0.3, 0.4).unwrap(),
            YoloRecord::new(3, 0.5, 0.5, 1.0, 1.0).unwrap(),
        ];
        let text = format_yolo(&recs);
        assert_eq!(text.lines().next().unwrap(), "0 0.25 0.4 0.3 0.4");
        assert_eq!(parse_yolo(&text).unwrap(), recs);
        assert!(matches!(
            parse_yolo("0 0.5 0.5\n"),
            Err(DatasetError::YoloLine { line: 1, .. })
        ));
        assert!(parse_yolo("\n0 0.5 0.5 0.2 x").is_err());
    }
}
