//! Core kernels for the spill-detection toolkit.
//!
//! Everything in this crate is free of network I/O: box geometry and the
//! hit-rate / mAP metrics, COCO and YOLO annotation formats, feathered mask
//! rendering, the tensor container and low-rank merge, prompt assembly and
//! response parsing for chat-style vision models, and the evaluation harness.
//!
//! Interchangeable algorithms (hit matching rules, mask ramps, detector
//! sources) sit behind traits and are looked up by name through
//! [`registry::Registry`], so a config file or CLI flag selects them at runtime.

pub mod annotation;
pub mod classes;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod eval;
pub mod fixtures;
pub mod generation;
pub mod geometry;
pub mod lora;
pub mod mask;
pub mod metrics;
pub mod monitor;
pub mod prompts;
pub mod registry;
pub mod util;
pub mod vlm;

pub use classes::{ClassId, ClassRegistry};
pub use geometry::{iou, is_hit, BBox, Detection, GeometryError, GroundTruth};
