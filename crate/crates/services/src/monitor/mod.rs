//! Frame monitoring: ingest frames, run the detector, raise and deliver alerts.

mod ingest;
mod pipeline;
mod server;
mod sinks;

pub use ingest::{default_frame_sources, DirectoryWatcher, FrameSource, FrameSourceFactory, Ingest, IngestError, ScanResult};
pub use pipeline::{FrameEvaluator, FrameOutcome, Monitor, MonitorStats};
pub use server::{push_router, PushState};
pub use sinks::{
    build_sinks, default_sinks, dispatch_alert, read_jsonl, AlertSink, DeadLetter, Delivery,
    JsonlWriter, LogSink, SinkError, SinkFactory, WebhookSink,
};
