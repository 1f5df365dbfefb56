//! Tensor checkpoint container and offline low-rank adapter merging
//! (`W' = W + alpha * A * B`).

mod merge;
mod store;

pub use merge::{
    adapters_to_store, load_adapters, merge, merge_store, LoraAdapter, Matrix, MergeSummary,
    Pathway, PathwayFilter,
};
pub use store::{read_store, write_store, Dtype, TensorInfo, TensorStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoraError {
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("unsupported dtype '{0}' (only F32 is supported)")]
    UnsupportedDtype(String),
    #[error("no tensor named '{0}'")]
    MissingTensor(String),
    #[error("dimension mismatch: weight is {weight:?}, adapter expects {adapter:?}")]
    Dimension {
        weight: (usize, usize),
        adapter: (usize, usize),
    },
    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
    #[error("adapter targets unknown tensor '{0}'")]
    UnknownTarget(String),
    #[error("unknown pathway variant '{0}' (expected L, V or V+L)")]
    UnknownVariant(String),
}
