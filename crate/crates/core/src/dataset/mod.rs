//! Annotation corpora: COCO-style JSON, YOLO text labels, near-duplicate
//! detection and seeded split manifests.

mod coco;
mod dedup;
mod split;
mod yolo;

pub use coco::{
    parse_coco, parse_coco_results, predictions_to_results, CocoAnnotation, CocoCategory, CocoDataset, CocoImage,
    DatasetWarning, ParsedCoco,
};
pub use dedup::{dedup_files, dedup_images, dhash, DedupReport, DuplicateCluster, PerceptualHash};
pub use split::{make_splits, SourceTag, SplitManifest, SplitProfile};
pub use yolo::{
    coco_dataset_to_yolo, coco_to_yolo, format_yolo, parse_yolo, yolo_to_coco, YoloRecord,
};

use crate::classes::ClassId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("dangling references: image ids {images:?}, category ids {categories:?}")]
    Dangling {
        images: Vec<u64>,
        categories: Vec<ClassId>,
    },
    #[error("duplicate image id {0}")]
    DuplicateImage(u64),
    #[error("degenerate box {bbox:?}: width and height must be positive")]
    DegenerateBox { bbox: [f64; 4] },
    #[error("image dimensions must be positive, got {0}x{1}")]
    BadDimensions(f64, f64),
    #[error("YOLO value out of range [0, 1]: {0:?}")]
    Range([f64; 4]),
    #[error("YOLO line {line}: {message}")]
    YoloLine { line: usize, message: String },
    #[error("split counts total {requested} but only {available} images are available")]
    Oversubscribed { requested: usize, available: usize },
    #[error("duplicate id {0} in split input")]
    DuplicateId(u64),
    #[error("class index {0} has no category")]
    UnknownClassIndex(usize),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}
