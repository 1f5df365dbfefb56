use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::DatasetError;
use crate::classes::{ClassId, ClassRegistry};
use crate::geometry::{BBox, Detection, GroundTruth};
use crate::metrics::ImageEval;
use crate::util::{byte_offset, serialize_numbers, serialize_opt_number};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// One annotation, or one prediction when `score` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    pub category_id: ClassId,
    /// `[x, y, w, h]` in absolute pixels.
    #[serde(serialize_with = "serialize_numbers")]
    pub bbox: [f64; 4],
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "serialize_opt_number"
    )]
    pub score: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CocoAnnotation {
    pub fn to_bbox(&self) -> Result<BBox, crate::geometry::GeometryError> {
        let [x, y, w, h] = self.bbox;
        BBox::from_xywh(x, y, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: ClassId,
    pub name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetWarning {
    ClampedBox {
        annotation_index: usize,
        before: [f64; 4],
        after: [f64; 4],
    },
    SkippedImage {
        path: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCoco {
    pub dataset: CocoDataset,
    pub warnings: Vec<DatasetWarning>,
}

fn json_error(bytes: &[u8], e: serde_json::Error) -> DatasetError {
    DatasetError::Json {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    }
}

/// Parses and validates a COCO-style dataset.
///
/// Dangling image or category references and non-positive box extents are
/// errors. Boxes overflowing their image are clamped and reported as warnings.
pub fn parse_coco(bytes: &[u8]) -> Result<ParsedCoco, DatasetError> {
    let dataset: CocoDataset = serde_json::from_slice(bytes).map_err(|e| json_error(bytes, e))?;
    dataset.validate()
}

/// Parses a COCO results array (detector output), as produced by external detectors.
pub fn parse_coco_results(bytes: &[u8]) -> Result<Vec<CocoAnnotation>, DatasetError> {
    let anns: Vec<CocoAnnotation> =
        serde_json::from_slice(bytes).map_err(|e| json_error(bytes, e))?;
    for a in &anns {
        let [_, _, w, h] = a.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(DatasetError::DegenerateBox { bbox: a.bbox });
        }
    }
    Ok(anns)
}

/// Detector output as a COCO results array, ordered by image then rank.
pub fn predictions_to_results(predictions: &BTreeMap<u64, Vec<Detection>>) -> Vec<CocoAnnotation> {
    predictions
        .iter()
        .flat_map(|(image_id, dets)| {
            dets.iter().map(move |d| CocoAnnotation {
                id: None,
                image_id: *image_id,
                category_id: d.class_id,
                bbox: d.bbox.to_xywh(),
                score: Some(d.score),
                extra: Map::new(),
            })
        })
        .collect()
}

impl CocoDataset {
    pub fn validate(mut self) -> Result<ParsedCoco, DatasetError> {
        let mut dims = BTreeMap::new();
        for img in &self.images {
            if dims.insert(img.id, (img.width, img.height)).is_some() {
                return Err(DatasetError::DuplicateImage(img.id));
            }
        }
        let cats: BTreeSet<ClassId> = self.categories.iter().map(|c| c.id).collect();

        let mut bad_images = BTreeSet::new();
        let mut bad_cats = BTreeSet::new();
        for a in &self.annotations {
            if !dims.contains_key(&a.image_id) {
                bad_images.insert(a.image_id);
            }
            if !cats.contains(&a.category_id) {
                bad_cats.insert(a.category_id);
            }
        }
        if !bad_images.is_empty() || !bad_cats.is_empty() {
            return Err(DatasetError::Dangling {
                images: bad_images.into_iter().collect(),
                categories: bad_cats.into_iter().collect(),
            });
        }

        let mut warnings = Vec::new();
        for (i, a) in self.annotations.iter_mut().enumerate() {
            let [x, y, w, h] = a.bbox;
            if !(w > 0.0 && h > 0.0) || a.bbox.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::DegenerateBox { bbox: a.bbox });
            }
            let (iw, ih) = dims[&a.image_id];
            let (iw, ih) = (iw as f64, ih as f64);
            let x0 = x.clamp(0.0, iw);
            let y0 = y.clamp(0.0, ih);
            let x1 = (x + w).clamp(0.0, iw);
            let y1 = (y + h).clamp(0.0, ih);
            let clamped = [x0, y0, x1 - x0, y1 - y0];
            if clamped != a.bbox {
                if clamped[2] <= 0.0 || clamped[3] <= 0.0 {
                    return Err(DatasetError::DegenerateBox { bbox: a.bbox });
                }
                tracing::warn!(annotation = i, ?a.bbox, ?clamped, "clamped out-of-bounds box");
                warnings.push(DatasetWarning::ClampedBox {
                    annotation_index: i,
                    before: a.bbox,
                    after: clamped,
                });
                a.bbox = clamped;
            }
        }
        Ok(ParsedCoco {
            dataset: self,
            warnings,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn image(&self, id: u64) -> Option<&CocoImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn ground_truths(&self, image_id: u64) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .filter_map(|a| a.to_bbox().ok().map(|b| GroundTruth::new(b, a.category_id)))
            .collect()
    }

    /// Ground truths and the supplied predictions, per image, in image order.
    pub fn image_evals(
        &self,
        image_ids: &[u64],
        predictions: &BTreeMap<u64, Vec<Detection>>,
    ) -> Vec<ImageEval> {
        image_ids
            .iter()
            .map(|&id| ImageEval {
                image_id: id,
                predictions: predictions.get(&id).cloned().unwrap_or_default(),
                ground_truths: self.ground_truths(id),
            })
            .collect()
    }

    /// Categories built from a class registry.
    pub fn categories_from(registry: &ClassRegistry) -> Vec<CocoCategory> {
        registry
            .entries()
            .iter()
            .map(|e| CocoCategory {
                id: e.id,
                name: e.name.clone(),
                extra: Map::new(),
            })
            .collect()
    }

    pub fn next_annotation_id(&self) -> u64 {
        self.annotations
            .iter()
            .filter_map(|a| a.id)
            .max()
            .map_or(1, |m| m + 1)
    }

    pub fn next_image_id(&self) -> u64 {
        self.images.iter().map(|i| i.id).max().map_or(1, |m| m + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RECORD: &str =
        r#"{"image_id": 134, "category_id": 3, "bbox": [256, 411, 142, 95], "score": 0.97}"#;

    fn dataset_with(record: &str) -> String {
        format!(
            r#"{{"images":[{{"id":134,"file_name":"scene.png","width":1024,"height":1024}}],
               "annotations":[{record}],
               "categories":[{{"id":3,"name":"chemical-discoloration"}}]}}"#
        )
    }

    #[test]
    fn supplementary_record_parses_and_round_trips() {
        let parsed = parse_coco(dataset_with(RECORD).as_bytes()).unwrap();
        assert!(parsed.warnings.is_empty());
        let a = &parsed.dataset.annotations[0];
        assert_eq!(a.image_id, 134);
        assert_eq!(a.category_id, ClassId(3));
        assert_eq!(a.bbox, [256.0, 411.0, 142.0, 95.0]);
        assert_eq!(a.score, Some(0.97));

        let reser: Value = serde_json::to_value(a).unwrap();
        let orig: Value = serde_json::from_str(RECORD).unwrap();
        assert_eq!(reser, orig);
    }

    #[test]
    fn predictions_become_the_record_shape() {
        let d = Detection::new(BBox::from_xywh(256.0, 411.0, 142.0, 95.0).unwrap(), ClassId(3), 0.97).unwrap();
        let rows = predictions_to_results(&BTreeMap::from([(134, vec![d])]));
        let got: Value = serde_json::to_value(&rows[0]).unwrap();
        assert_eq!(got, serde_json::from_str::<Value>(RECORD).unwrap());
    }

    #[test]
    fn empty_annotations_valid() {
        let s = r#"{"images":[{"id":1,"file_name":"a","width":4,"height":4}],"annotations":[],"categories":[]}"#;
        let p = parse_coco(s.as_bytes()).unwrap();
        assert_eq!(p.dataset.images.len(), 1);
    }

    #[test]
    fn dangling_image_reference() {
        let rec = r#"{"image_id": 999, "category_id": 3, "bbox": [1, 1, 2, 2]}"#;
        let err = parse_coco(dataset_with(rec).as_bytes()).unwrap_err();
        // Independent reference check straight off the raw JSON.
        let raw: Value = serde_json::from_str(&dataset_with(rec)).unwrap();
        let ids: BTreeSet<u64> = raw["images"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| i["id"].as_u64().unwrap())
            .collect();
        let missing: Vec<u64> = raw["annotations"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a["image_id"].as_u64().unwrap())
            .filter(|id| !ids.contains(id))
            .collect();
        assert_eq!(
            err,
            DatasetError::Dangling {
                images: missing,
                categories: vec![]
            }
        );
        assert!(err.to_string().contains("999"));
    }

    #[test]
    fn malformed_json_reports_offset() {
        let s = b"{\"images\": [\n  oops]}";
        match parse_coco(s) {
            Err(DatasetError::Json { offset, .. }) => assert_eq!(s[offset], b'o'),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overflow_clamped_with_warning() {
        let rec = r#"{"id": 1, "image_id": 134, "category_id": 3, "bbox": [1000, 10, 30, 20]}"#;
        let p = parse_coco(dataset_with(rec).as_bytes()).unwrap();
        assert_eq!(p.dataset.annotations[0].bbox, [1000.0, 10.0, 24.0, 20.0]);
        assert_eq!(p.warnings.len(), 1);
        let again = parse_coco(p.dataset.to_json_pretty().as_bytes()).unwrap();
        assert!(again.warnings.is_empty());
        assert_eq!(again.dataset, p.dataset);
    }

    #[test]
    fn unknown_fields_preserved() {
        let s = r#"{"info":{"v":1},"images":[{"id":1,"file_name":"a","width":4,"height":4,"license":7}],"annotations":[],"categories":[]}"#;
        let p = parse_coco(s.as_bytes()).unwrap();
        let out: Value = serde_json::to_value(&p.dataset).unwrap();
        assert_eq!(out["info"]["v"], 1);
        assert_eq!(out["images"][0]["license"], 7);
    }

    #[test]
    fn zero_width_rejected() {
        let rec = r#"{"image_id": 134, "category_id": 3, "bbox": [1, 1, 0, 2]}"#;
        assert!(matches!(
            parse_coco(dataset_with(rec).as_bytes()),
            Err(DatasetError::DegenerateBox { .. })
        ));
    }
}
