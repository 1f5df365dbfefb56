use std::sync::Arc;
use std::time::Duration;

use futures::{stream, StreamExt};
use spillkit_core::generation::{DiffusionJob, JobStatus};
use tokio::sync::{Mutex, Notify};
use tokio::task::JoinHandle;

use super::store::{AnnotationStore, InpaintChain};
use crate::diffusion::Orchestrator;

/// Runs one chain; each job after the first paints onto its predecessor's output.
pub async fn run_chain(orch: &Orchestrator, chain: &InpaintChain) -> Result<String, String> {
    let mut prev: Option<String> = None;
    for job in &chain.jobs {
        let mut job = job.clone();
        if let Some(p) = prev.take() {
            job.scene_ref = p;
        }
        let rec = orch.submit_and_poll(DiffusionJob::Inpaint(job)).await;
        if rec.status != JobStatus::Done {
            return Err(rec.error.unwrap_or_else(|| format!("job {} failed", rec.job_id)));
        }
        prev = rec.artifact_path;
    }
    prev.ok_or_else(|| format!("chain {} has no jobs", chain.chain_id))
}

/// Runs everything currently queued, `parallelism` chains at a time, and
/// returns how many chains finished.
pub async fn drain(store: &Mutex<AnnotationStore>, orch: &Orchestrator, parallelism: usize) -> usize {
    let chains = match store.lock().await.take_queued() {
        Ok(c) => c,
        Err(e) => {
            tracing::error!(error = %e, "could not read inpainting queue");
            return 0;
        }
    };
    let n = chains.len();
    let mut results = stream::iter(chains)
        .map(|c| async move {
            let out = run_chain(orch, &c).await;
            (c.chain_id, out)
        })
        .buffer_unordered(parallelism.max(1));
    while let Some((id, out)) = results.next().await {
        if let Err(e) = store.lock().await.complete_chain(&id, out) {
            tracing::error!(chain = %id, error = %e, "could not record inpainting result");
        }
    }
    n
}

/// Background loop: drains the queue whenever woken, and at least every `idle`.
pub fn spawn_worker(
    store: Arc<Mutex<AnnotationStore>>,
    orch: Arc<Orchestrator>,
    wake: Arc<Notify>,
    parallelism: usize,
    idle: Duration,
) -> JoinHandle<()> {
    tokio::spawn(async move {
        loop {
            drain(&store, &orch, parallelism).await;
            let _ = tokio::time::timeout(idle, wake.notified()).await;
        }
    })
}
