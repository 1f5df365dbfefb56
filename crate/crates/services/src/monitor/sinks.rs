use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use spillkit_core::config::SinkConfig;
use spillkit_core::monitor::AlertRecord;
use spillkit_core::registry::Registry;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SinkError {
    #[error("{sink}: {message}")]
    Delivery { sink: String, message: String },
    #[error("sink setup: {0}")]
    Setup(String),
}

#[async_trait]
pub trait AlertSink: Send + Sync {
    fn name(&self) -> String;
    async fn deliver(&self, alert: &AlertRecord) -> Result<(), SinkError>;
}

fn open_append(path: &Path) -> std::io::Result<File> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    OpenOptions::new().create(true).append(true).open(path)
}

/// Appends JSON lines under a lock; one line per call.
pub struct JsonlWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlWriter {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let file = Mutex::new(open_append(&path)?);
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, value: &T) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(value).expect("record serializes");
        line.push(b'\n');
        let mut f = self.file.lock().expect("jsonl lock");
        f.write_all(&line)?;
        f.flush()
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

pub struct WebhookSink {
    http: reqwest::Client,
    url: String,
    max_attempts: u32,
    backoff: Duration,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>, max_attempts: u32, backoff: Duration) -> Self {
        Self {
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(10))
                .build()
                .expect("http client builds"),
            url: url.into(),
            max_attempts: max_attempts.max(1),
            backoff,
        }
    }
}

#[async_trait]
impl AlertSink for WebhookSink {
    fn name(&self) -> String {
        format!("webhook:{}", self.url)
    }

    async fn deliver(&self, alert: &AlertRecord) -> Result<(), SinkError> {
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.http.post(&self.url).json(alert).send().await {
                Ok(r) if r.status().is_success() => return Ok(()),
                Ok(r) => last = format!("HTTP {}", r.status()),
                Err(e) => last = e.to_string(),
            }
            if attempt < self.max_attempts {
                tokio::time::sleep(self.backoff * 2u32.saturating_pow(attempt - 1)).await;
            }
        }
        Err(SinkError::Delivery {
            sink: self.name(),
            message: format!("{last} after {} attempts", self.max_attempts),
        })
    }
}

pub struct LogSink {
    writer: JsonlWriter,
}

impl LogSink {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        Ok(Self {
            writer: JsonlWriter::open(path)?,
        })
    }
}

#[async_trait]
impl AlertSink for LogSink {
    fn name(&self) -> String {
        format!("log:{}", self.writer.path().display())
    }

    async fn deliver(&self, alert: &AlertRecord) -> Result<(), SinkError> {
        self.writer.append(alert).map_err(|e| SinkError::Delivery {
            sink: self.name(),
            message: e.to_string(),
        })
    }
}

pub trait SinkFactory: Send + Sync {
    fn build(&self, cfg: &SinkConfig) -> Result<Arc<dyn AlertSink>, SinkError>;
}

struct WebhookFactory;
impl SinkFactory for WebhookFactory {
    fn build(&self, cfg: &SinkConfig) -> Result<Arc<dyn AlertSink>, SinkError> {
        match cfg {
            SinkConfig::Webhook {
                url,
                max_attempts,
                backoff_ms,
            } => Ok(Arc::new(WebhookSink::new(url, *max_attempts, Duration::from_millis(*backoff_ms)))),
            other => Err(SinkError::Setup(format!("not a webhook sink: {other:?}"))),
        }
    }
}

struct LogFactory;
impl SinkFactory for LogFactory {
    fn build(&self, cfg: &SinkConfig) -> Result<Arc<dyn AlertSink>, SinkError> {
        match cfg {
            SinkConfig::Log { path } => LogSink::open(path)
                .map(|s| Arc::new(s) as Arc<dyn AlertSink>)
                .map_err(|e| SinkError::Setup(format!("{}: {e}", path.display()))),
            other => Err(SinkError::Setup(format!("not a log sink: {other:?}"))),
        }
    }
}

pub fn default_sinks() -> Registry<dyn SinkFactory> {
    let mut reg: Registry<dyn SinkFactory> = Registry::new("alert sink");
    reg.register("webhook", Arc::new(WebhookFactory));
    reg.register("log", Arc::new(LogFactory));
    reg
}

pub fn build_sinks(configs: &[SinkConfig]) -> Result<Vec<Arc<dyn AlertSink>>, SinkError> {
    let reg = default_sinks();
    configs
        .iter()
        .map(|c| {
            let kind = match c {
                SinkConfig::Webhook { .. } => "webhook",
                SinkConfig::Log { .. } => "log",
            };
            reg.get(kind).map_err(|e| SinkError::Setup(e.to_string()))?.build(c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub sink: String,
    pub error: String,
    pub alert: AlertRecord,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub sink: String,
    pub delivered: bool,
    pub error: Option<String>,
}

/// Delivers to every sink; each failed delivery also lands in the dead-letter file.
pub async fn dispatch_alert(
    alert: &AlertRecord,
    sinks: &[Arc<dyn AlertSink>],
    dead_letter: &JsonlWriter,
) -> Vec<Delivery> {
    let mut out = Vec::with_capacity(sinks.len());
    for s in sinks {
        match s.deliver(alert).await {
            Ok(()) => out.push(Delivery {
                sink: s.name(),
                delivered: true,
                error: None,
            }),
            Err(e) => {
                let dl = DeadLetter {
                    sink: s.name(),
                    error: e.to_string(),
                    alert: alert.clone(),
                    at: Utc::now(),
                };
                if let Err(io) = dead_letter.append(&dl) {
                    tracing::error!(error = %io, "dead-letter write failed");
                }
                out.push(Delivery {
                    sink: s.name(),
                    delivered: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    out
}
