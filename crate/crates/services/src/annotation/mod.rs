//! Backend of the placement and review loop.

mod server;
mod store;
mod worker;

pub use server::{annotation_router, AnnotationState, TOKEN_HEADER};
pub use store::{
    AnnotationStore, ChainStatus, CorpusEntry, InpaintChain, StoreError, StoreSettings, TaskPage, Verdict,
};
pub use worker::{drain, run_chain, spawn_worker};
