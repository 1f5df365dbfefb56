//! Feathered soft masks for box-guided inpainting.
//!
//! Pixels inside the box carry the peak value `round(opacity * 255)`; outside,
//! the value falls off with Chebyshev distance to the box and reaches zero at
//! `feather_px`. Pixel `(px, py)` is inside when `x_min <= px` and
//! `px + 1 <= x_max` (same for y), so an integer box `[10, 30)` covers columns
//! 10..=29 and column 30 sits one pixel outside.

use std::path::Path;
use std::sync::Arc;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::registry::Registry;
use crate::util::write_atomic;

pub const DEFAULT_FEATHER_PX: f64 = 50.0;
pub const DEFAULT_OPACITY: f64 = 0.75;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("box {0:?} lies entirely outside the {1}x{2} image; mask would be empty")]
    Empty([f64; 4], u32, u32),
    #[error("feather must be finite and >= 0, got {0}")]
    Feather(f64),
    #[error("opacity must lie in (0, 1], got {0}")]
    Opacity(f64),
    #[error("image dimensions must be positive")]
    Dimensions,
    #[error("encoding mask: {0}")]
    Encode(#[from] image::ImageError),
    #[error("writing mask: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub bbox: BBox,
    pub feather_px: f64,
    pub opacity: f64,
}

impl MaskSpec {
    pub fn new(bbox: BBox, feather_px: f64, opacity: f64) -> Result<Self, MaskError> {
        if !feather_px.is_finite() || feather_px < 0.0 {
            return Err(MaskError::Feather(feather_px));
        }
        if !(opacity > 0.0 && opacity <= 1.0) {
            return Err(MaskError::Opacity(opacity));
        }
        Ok(Self {
            bbox,
            feather_px,
            opacity,
        })
    }

    pub fn with_defaults(bbox: BBox) -> Self {
        Self {
            bbox,
            feather_px: DEFAULT_FEATHER_PX,
            opacity: DEFAULT_OPACITY,
        }
    }

    pub fn peak(&self) -> u8 {
        (self.opacity * 255.0).round() as u8
    }

    /// Chebyshev distance from pixel `(px, py)` to the box, 0 inside.
    pub fn distance(&self, px: u32, py: u32) -> f64 {
        let (x, y) = (px as f64, py as f64);
        let b = &self.bbox;
        let dx = (b.x_min() - x).max(x + 1.0 - b.x_max()).max(0.0);
        let dy = (b.y_min() - y).max(y + 1.0 - b.y_max()).max(0.0);
        dx.max(dy)
    }
}

/// Falloff profile over the feather band: 1 at distance 0, 0 at or beyond `feather`.
pub trait MaskRamp: Send + Sync {
    fn name(&self) -> &'static str;
    fn weight(&self, distance: f64, feather: f64) -> f64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LinearRamp;

impl MaskRamp for LinearRamp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn weight(&self, distance: f64, feather: f64) -> f64 {
        if feather == 0.0 {
            return if distance == 0.0 { 1.0 } else { 0.0 };
        }
        1.0 - (distance / feather).clamp(0.0, 1.0)
    }
}

/// Gaussian falloff with sigma = feather / 3, truncated to zero at the band edge.
#[derive(Debug, Default, Clone, Copy)]
pub struct GaussianRamp;

impl MaskRamp for GaussianRamp {
    fn name(&self) -> &'static str {
        "gaussian"
    }
    fn weight(&self, distance: f64, feather: f64) -> f64 {
        if distance <= 0.0 {
            return 1.0;
        }
        if distance >= feather {
            return 0.0;
        }
        let sigma = feather / 3.0;
        (-0.5 * (distance / sigma).powi(2)).exp()
    }
}

pub fn default_mask_ramps() -> Registry<dyn MaskRamp> {
    let mut reg: Registry<dyn MaskRamp> = Registry::new("mask ramp");
    reg.register("linear", Arc::new(LinearRamp));
    reg.register("gaussian", Arc::new(GaussianRamp));
    reg
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<u8>,
}

impl MaskImage {
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([self.get(x, y)]))
    }

    pub fn to_png(&self) -> Result<Vec<u8>, MaskError> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_gray().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

/// Parameters echoed next to every rendered mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub spec: MaskSpec,
    pub ramp: String,
    pub width: u32,
    pub height: u32,
}

pub fn render_feathered_mask(spec: &MaskSpec, width: u32, height: u32) -> Result<MaskImage, MaskError> {
    render_mask_with(&LinearRamp, spec, width, height)
}

pub fn render_mask_with(
    ramp: &dyn MaskRamp,
    spec: &MaskSpec,
    width: u32,
    height: u32,
) -> Result<MaskImage, MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::Dimensions);
    }
    let b = &spec.bbox;
    let (w, h) = (width as f64, height as f64);
    if b.x_max() <= 0.0 || b.y_max() <= 0.0 || b.x_min() >= w || b.y_min() >= h {
        return Err(MaskError::Empty(b.to_xywh(), width, height));
    }
    let peak = spec.opacity * 255.0;
    let mut values = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            let wgt = ramp.weight(spec.distance(x, y), spec.feather_px);
            values.push((peak * wgt).round() as u8);
        }
    }
    Ok(MaskImage {
        width,
        height,
        values,
    })
}

/// Writes `<path>` (8-bit grayscale PNG) and `<path>.json` (sidecar).
pub fn save_mask(
    mask: &MaskImage,
    spec: &MaskSpec,
    ramp: &str,
    path: &Path,
) -> Result<MaskSidecar, MaskError> {
    write_atomic(path, &mask.to_png()?)?;
    let sidecar = MaskSidecar {
        spec: *spec,
        ramp: ramp.to_string(),
        width: mask.width,
        height: mask.height,
    };
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&sidecar_path(path), &json)?;
    Ok(sidecar)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MaskSpec {
        MaskSpec::with_defaults(BBox::new(100.0, 100.0, 156.0, 156.0).unwrap())
    }

    #[test]
    fn peak_and_tail() {
        let m = render_feathered_mask(&spec(), 256, 256).unwrap();
        assert_eq!(m.get(128, 128), 191);
        assert_eq!(spec().peak(), 191);
        assert_eq!(m.get(100 - 50, 128), 0);
        assert_eq!(m.get(0, 0), 0);
    }

    #[test]
    fn quarter_feather() {
        let m = render_feathered_mask(&spec(), 256, 256).unwrap();
        // 25 px left of the first interior column and 25 px right of the last.
        assert_eq!(m.get(75, 128), 96);
        assert_eq!(m.get(155 + 25, 128), 96);
        // Brute-force scan: every pixel at Chebyshev distance exactly 25 reads 96.
        for y in 0..256 {
            for x in 0..256 {
                let dx = (100 - x as i64).max(x as i64 - 155).max(0);
                let dy = (100 - y as i64).max(y as i64 - 155).max(0);
                if dx.max(dy) == 25 {
                    assert_eq!(m.get(x, y), 96);
                }
            }
        }
    }

    #[test]
    fn hard_edge_without_feather() {
        let s = MaskSpec::new(BBox::new(2.0, 2.0, 4.0, 4.0).unwrap(), 0.0, 1.0).unwrap();
        let m = render_feathered_mask(&s, 6, 6).unwrap();
        assert_eq!(m.get(2, 2), 255);
        assert_eq!(m.get(3, 3), 255);
        assert_eq!(m.get(4, 3), 0);
        assert_eq!(m.values.iter().filter(|v| **v > 0).count(), 4);
    }

    #[test]
    fn errors() {
        let outside = MaskSpec::with_defaults(BBox::new(300.0, 0.0, 400.0, 10.0).unwrap());
        assert!(matches!(
            render_feathered_mask(&outside, 256, 256),
            Err(MaskError::Empty(..))
        ));
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(MaskSpec::new(b, -1.0, 0.5).is_err());
        assert!(MaskSpec::new(b, 1.0, 0.0).is_err());
        assert!(MaskSpec::new(b, 1.0, 1.1).is_err());
    }

    #[test]
    fn gaussian_ramp_bounded_and_monotone() {
        let g = GaussianRamp;
        let mut last = 1.0;
        for d in 0..=60 {
            let w = g.weight(d as f64, 50.0);
            assert!(w <= last && (0.0..=1.0).contains(&w));
            last = w;
        }
        assert_eq!(g.weight(50.0, 50.0), 0.0);
        let reg = default_mask_ramps();
        assert_eq!(reg.get("gaussian").unwrap().name(), "gaussian");
    }

    #[test]
    fn png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let m = render_feathered_mask(&s, 256, 256).unwrap();
        let p = dir.path().join("m.png");
        save_mask(&m, &s, "linear", &p).unwrap();
        let back = image::open(&p).unwrap().to_luma8();
        assert_eq!(back.into_raw(), m.values);
        let side: MaskSidecar =
            serde_json::from_slice(&std::fs::read(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side.spec, s);
    }
}
