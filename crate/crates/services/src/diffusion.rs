//! Submitting scene and inpainting jobs to a diffusion backend, polling them
//! to completion and persisting the resulting images next to a parameter
//! sidecar.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spillkit_core::config::DiffusionConfig;
use spillkit_core::generation::{ArtifactSidecar, DiffusionJob, JobRecord, JobStatus};
use spillkit_core::mask::sidecar_path;
use spillkit_core::registry::Registry;
use spillkit_core::util::{sha256_hex, write_atomic};

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("backend returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("rejected by content filter: {0}")]
    Rejected(String),
    #[error("backend job failed: {0}")]
    JobFailed(String),
    #[error("no result after {0} polls")]
    PollTimeout(u32),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("setup: {0}")]
    Setup(String),
}

impl BackendError {
    /// Whether another attempt could plausibly succeed.
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::JobFailed(_) | BackendError::PollTimeout(_) => true,
            BackendError::Status { code, .. } => *code >= 500 || *code == 429 || *code == 408,
            BackendError::Rejected(_) | BackendError::Protocol(_) | BackendError::Setup(_) => false,
        }
    }
}

/// Where a backend job stands.
#[derive(Debug, Clone, PartialEq)]
pub enum RemoteStatus {
    Pending,
    Done(Vec<u8>),
    Failed(String),
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submitted {
    pub remote_id: String,
    pub status: RemoteStatus,
}

#[async_trait]
pub trait DiffusionBackend: Send + Sync {
    fn name(&self) -> &str;
    async fn submit(&self, job: &DiffusionJob) -> Result<Submitted, BackendError>;
    async fn poll(&self, remote_id: &str) -> Result<RemoteStatus, BackendError>;
}

pub trait BackendFactory: Send + Sync {
    fn build(&self, cfg: &DiffusionConfig) -> Result<Arc<dyn DiffusionBackend>, BackendError>;
}

struct RestFactory;

impl BackendFactory for RestFactory {
    fn build(&self, cfg: &DiffusionConfig) -> Result<Arc<dyn DiffusionBackend>, BackendError> {
        Ok(Arc::new(RestBackend::from_config(cfg)?))
    }
}

pub fn default_backends() -> Registry<dyn BackendFactory> {
    let mut reg: Registry<dyn BackendFactory> = Registry::new("diffusion backend");
    reg.register("rest", Arc::new(RestFactory));
    reg
}

/// Minimal REST protocol: `POST /txt2img` and `POST /inpaint` take the job
/// JSON (plus base64 images for the inputs the backend cannot read itself)
/// and answer `{id, status, image?, image_url?, error?}`; `GET /jobs/{id}`
/// answers the same shape.
pub struct RestBackend {
    http: reqwest::Client,
    base: String,
    api_key: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireStatus {
    #[serde(default)]
    id: Option<String>,
    status: String,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    image_url: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

fn read_b64(path: &str) -> Result<String, BackendError> {
    std::fs::read(path)
        .map(|b| B64.encode(b))
        .map_err(|e| BackendError::Setup(format!("reading {path}: {e}")))
}

impl RestBackend {
    pub fn new(base: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Setup(e.to_string()))?;
        Ok(Self {
            http,
            base: base.into().trim_end_matches('/').to_string(),
            api_key,
        })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Self::new(&cfg.endpoint, key, Duration::from_millis(cfg.request_timeout_ms))
    }

    fn body(job: &DiffusionJob) -> Result<(&'static str, Value), BackendError> {
        match job {
            DiffusionJob::Scene(j) => {
                let mut v = serde_json::to_value(j).expect("job serializes");
                if Path::new(&j.style_ref).is_file() {
                    v["style_image"] = json!(read_b64(&j.style_ref)?);
                }
                Ok(("txt2img", v))
            }
            DiffusionJob::Inpaint(j) => {
                let mut v = serde_json::to_value(j).expect("job serializes");
                v["scene_image"] = json!(read_b64(&j.scene_ref)?);
                v["mask_image"] = json!(read_b64(&j.mask_ref)?);
                if let Some(r) = j.ip_adapter_spill_ref.as_deref().filter(|r| Path::new(r).is_file()) {
                    v["spill_ref_image"] = json!(read_b64(r)?);
                }
                Ok(("inpaint", v))
            }
        }
    }

    fn with_auth(&self, rb: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.api_key {
            Some(k) => rb.bearer_auth(k),
            None => rb,
        }
    }

    async fn read_status(&self, resp: reqwest::Response) -> Result<(Option<String>, RemoteStatus), BackendError> {
        let code = resp.status();
        let text = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        if !code.is_success() {
            let filtered = code.as_u16() == 422
                || serde_json::from_str::<Value>(&text)
                    .ok()
                    .and_then(|v| v.get("code").and_then(Value::as_str).map(|c| c == "content_filter"))
                    .unwrap_or(false);
            if filtered {
                return Err(BackendError::Rejected(text));
            }
            return Err(BackendError::Status {
                code: code.as_u16(),
                body: text,
            });
        }
        let w: WireStatus =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("{e}: {text}")))?;
        let status = match w.status.as_str() {
            "queued" | "running" | "pending" => RemoteStatus::Pending,
            "done" | "succeeded" => {
                let bytes = match (w.image, w.image_url) {
                    (Some(b), _) => B64
                        .decode(b.trim())
                        .map_err(|e| BackendError::Protocol(format!("artifact base64: {e}")))?,
                    (None, Some(url)) => self.fetch(&url).await?,
                    (None, None) => return Err(BackendError::Protocol("done without an artifact".into())),
                };
                RemoteStatus::Done(bytes)
            }
            "failed" => RemoteStatus::Failed(w.error.unwrap_or_default()),
            "rejected" => RemoteStatus::Rejected(w.error.unwrap_or_default()),
            other => return Err(BackendError::Protocol(format!("unknown status '{other}'"))),
        };
        Ok((w.id, status))
    }

    async fn fetch(&self, url: &str) -> Result<Vec<u8>, BackendError> {
        let url = if url.starts_with("http") {
            url.to_string()
        } else {
            format!("{}/{}", self.base, url.trim_start_matches('/'))
        };
        let resp = self
            .with_auth(self.http.get(&url))
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(BackendError::Status {
                code: resp.status().as_u16(),
                body: resp.text().await.unwrap_or_default(),
            });
        }
        resp.bytes()
            .await
            .map(|b| b.to_vec())
            .map_err(|e| BackendError::Transport(e.to_string()))
    }
}

#[async_trait]
impl DiffusionBackend for RestBackend {
    fn name(&self) -> &str {
        "rest"
    }

    async fn submit(&self, job: &DiffusionJob) -> Result<Submitted, BackendError> {
        let (path, body) = Self::body(job)?;
        let resp = self
            .with_auth(self.http.post(format!("{}/{path}", self.base)))
            .json(&body)
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let (id, status) = self.read_status(resp).await?;
        Ok(Submitted {
            remote_id: id.unwrap_or_else(|| job.job_id()),
            status,
        })
    }

    async fn poll(&self, remote_id: &str) -> Result<RemoteStatus, BackendError> {
        let resp = self
            .with_auth(self.http.get(format!("{}/jobs/{remote_id}", self.base)))
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(self.read_status(resp).await?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1`, given `attempt` failures so far (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

/// Runs jobs against one backend and owns the artifact directory.
pub struct Orchestrator {
    backend: Arc<dyn DiffusionBackend>,
    retry: RetryPolicy,
    poll_interval: Duration,
    max_polls: u32,
    out_dir: PathBuf,
}

impl Orchestrator {
    pub fn new(backend: Arc<dyn DiffusionBackend>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            poll_interval: Duration::from_millis(500),
            max_polls: 600,
            out_dir: out_dir.into(),
        }
    }

    pub fn from_config(cfg: &DiffusionConfig, out_dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let backend = default_backends()
            .get(&cfg.backend)
            .map_err(|e| BackendError::Setup(e.to_string()))?
            .build(cfg)?;
        Ok(Self::new(backend, out_dir)
            .with_retry(RetryPolicy {
                max_attempts: cfg.retry.max_attempts.max(1),
                base_delay: Duration::from_millis(cfg.retry.backoff_base_ms),
            })
            .with_polling(Duration::from_millis(cfg.poll_interval_ms), cfg.max_polls))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_polling(mut self, interval: Duration, max_polls: u32) -> Self {
        self.poll_interval = interval;
        self.max_polls = max_polls.max(1);
        self
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn artifact_path(&self, record: &JobRecord) -> PathBuf {
        let sub = match record.kind {
            spillkit_core::generation::JobKind::Scene => "scenes",
            spillkit_core::generation::JobKind::Inpaint => "inpainted",
        };
        self.out_dir.join(sub).join(format!("{}.png", record.job_id))
    }

    async fn attempt(&self, job: &DiffusionJob) -> Result<Vec<u8>, BackendError> {
        let sub = self.backend.submit(job).await?;
        let mut status = sub.status;
        let mut polls = 0;
        loop {
            match status {
                RemoteStatus::Done(bytes) => return Ok(bytes),
                RemoteStatus::Failed(e) => return Err(BackendError::JobFailed(e)),
                RemoteStatus::Rejected(e) => return Err(BackendError::Rejected(e)),
                RemoteStatus::Pending => {}
            }
            if polls >= self.max_polls {
                return Err(BackendError::PollTimeout(polls));
            }
            tokio::time::sleep(self.poll_interval).await;
            polls += 1;
            status = self.backend.poll(&sub.remote_id).await?;
        }
    }

    fn persist(&self, record: &mut JobRecord, bytes: &[u8]) -> Result<(), BackendError> {
        image::load_from_memory(bytes)
            .map_err(|e| BackendError::Protocol(format!("artifact is not a decodable image: {e}")))?;
        let path = self.artifact_path(record);
        let side = sidecar_path(&path);
        let sidecar = ArtifactSidecar {
            job_id: record.job_id.clone(),
            artifact_sha256: sha256_hex(bytes),
            job: record.job.clone(),
        };
        let io = |e: std::io::Error| BackendError::Setup(format!("writing {}: {e}", path.display()));
        write_atomic(&path, bytes).map_err(io)?;
        write_atomic(&side, &sidecar.to_bytes()).map_err(io)?;
        record.artifact_path = Some(path.to_string_lossy().into_owned());
        record.sidecar_path = Some(side.to_string_lossy().into_owned());
        Ok(())
    }

    /// Runs one job to a terminal record. Retryable failures are retried with
    /// exponential backoff up to the policy limit; content-filter rejections
    /// and protocol errors fail immediately.
    pub async fn submit_and_poll(&self, job: DiffusionJob) -> JobRecord {
        let mut record = JobRecord::queued(job);
        loop {
            record.advance(JobStatus::Running).expect("running is reachable from queued/running");
            record.attempts += 1;
            let outcome = match self.attempt(&record.job).await {
                Ok(bytes) => self.persist(&mut record, &bytes),
                Err(e) => Err(e),
            };
            match outcome {
                Ok(()) => {
                    record.error = None;
                    record.advance(JobStatus::Done).expect("running -> done");
                    break;
                }
                Err(e) => {
                    tracing::warn!(job = %record.job_id, attempt = record.attempts, error = %e, "diffusion attempt failed");
                    record.error = Some(e.to_string());
                    if !e.retryable() || record.attempts >= self.retry.max_attempts {
                        record.advance(JobStatus::Failed).expect("running -> failed");
                        break;
                    }
                    tokio::time::sleep(self.retry.delay(record.attempts)).await;
                }
            }
        }
        let rec_path = self.out_dir.join("jobs").join(format!("{}.json", record.job_id));
        if let Err(e) = write_atomic(&rec_path, &serde_json::to_vec_pretty(&record).expect("record serializes")) {
            tracing::warn!(path = %rec_path.display(), error = %e, "could not persist job record");
        }
        record
    }

    /// At most `parallelism` jobs in flight; records come back in input order.
    pub async fn run_batch(&self, jobs: Vec<DiffusionJob>, parallelism: usize) -> Vec<JobRecord> {
        stream::iter(jobs)
            .map(|j| self.submit_and_poll(j))
            .buffered(parallelism.max(1))
            .collect()
            .await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(
            [p.delay(1), p.delay(2), p.delay(3)],
            [Duration::from_secs(1), Duration::from_secs(2), Duration::from_secs(4)]
        );
    }

    #[test]
    fn retry_classification() {
        assert!(BackendError::Status { code: 500, body: String::new() }.retryable());
        assert!(BackendError::Transport("refused".into()).retryable());
        assert!(!BackendError::Rejected("nsfw".into()).retryable());
        assert!(!BackendError::Status { code: 400, body: String::new() }.retryable());
    }
}
