//! Axis-aligned boxes, detections and the IoU hit rule.

use serde::{Deserialize, Serialize};

use crate::classes::ClassId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid geometry: non-finite coordinate in {0:?}")]
    NonFinite([f64; 4]),
    #[error("invalid geometry: inverted box {0:?} (min must not exceed max)")]
    Inverted([f64; 4]),
    #[error("invalid threshold {0}: IoU threshold must lie in (0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid score {0}: must lie in [0, 1]")]
    InvalidScore(f64),
}

/// Box in absolute pixel corners, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = GeometryError;
    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        BBox::new(r.x_min, r.y_min, r.x_max, r.y_max)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let c = [x_min, y_min, x_max, y_max];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(c));
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::Inverted(c));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// From a COCO `[x, y, w, h]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox, GeometryError> {
        BBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn scale(&self, s: f64) -> Result<BBox, GeometryError> {
        BBox::new(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: ClassId,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: ClassId, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: ClassId,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: ClassId) -> Self {
        Self { bbox, class_id }
    }
}

/// Intersection over union. Zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn check_threshold(tau: f64) -> Result<f64, GeometryError> {
    if tau.is_finite() && tau > 0.0 && tau <= 1.0 {
        Ok(tau)
    } else {
        Err(GeometryError::InvalidThreshold(tau))
    }
}

/// A prediction hits when its IoU with the ground truth reaches `tau` (inclusive).
pub fn is_hit(pred: &BBox, gt: &BBox, tau: f64) -> Result<bool, GeometryError> {
    let tau = check_threshold(tau)?;
    Ok(iou(pred, gt) >= tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = b(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn overlapping_squares() {
        // 1 cell of overlap over 7 cells of union.
        let v = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        assert!(!is_hit(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0), 0.5).unwrap());
    }

    #[test]
    fn boundary_is_inclusive() {
        let pred = b(0.0, 0.0, 2.0, 1.0);
        let gt = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&pred, &gt), 0.5);
        assert!(is_hit(&pred, &gt, 0.5).unwrap());
    }

    #[test]
    fn degenerate_boxes_never_hit() {
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        assert!(!is_hit(&p, &p, 0.5).unwrap());
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            BBox::new(f64::NAN, 0.0, 1.0, 1.0),
            Err(GeometryError::NonFinite(_))
        ));
        assert!(matches!(
            BBox::new(2.0, 0.0, 1.0, 1.0),
            Err(GeometryError::Inverted(_))
        ));
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert!(is_hit(&a, &a, 0.0).is_err());
        assert!(is_hit(&a, &a, 1.5).is_err());
        assert!(is_hit(&a, &a, 1.0).unwrap());
        assert!(Detection::new(a, ClassId(1), 1.2).is_err());
    }

    #[test]
    fn serde_validates() {
        let json = r#"{"x_min":2,"y_min":0,"x_max":1,"y_max":1}"#;
        assert!(serde_json::from_str::<BBox>(json).is_err());
        let a = b(0.5, 1.0, 2.0, 3.0);
        let back: BBox = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, back);
    }
}
