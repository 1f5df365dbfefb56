use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use spillkit_core::config::WatchSource;
use spillkit_core::monitor::FrameEvent;
use spillkit_core::registry::Registry;
use spillkit_core::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{image_ref}: undecodable frame: {reason}")]
    Corrupt { image_ref: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Shared admission point for every source: assigns frame ids and drops
/// frames whose content was already seen.
#[derive(Debug, Default)]
pub struct Ingest {
    seen: Mutex<HashSet<String>>,
    next_id: AtomicU64,
}

impl Ingest {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// `Ok(None)` for a duplicate, `Err` for bytes that do not decode as an image.
    pub fn admit(
        &self,
        source_id: &str,
        image_ref: &str,
        bytes: &[u8],
        timestamp: DateTime<Utc>,
    ) -> Result<Option<FrameEvent>, IngestError> {
        let img = image::load_from_memory(bytes).map_err(|e| IngestError::Corrupt {
            image_ref: image_ref.to_string(),
            reason: e.to_string(),
        })?;
        let hash = sha256_hex(bytes);
        if !self.seen.lock().expect("ingest lock").insert(hash.clone()) {
            return Ok(None);
        }
        Ok(Some(FrameEvent {
            frame_id: self.next_id.fetch_add(1, Ordering::SeqCst) + 1,
            source_id: source_id.to_string(),
            timestamp,
            image_ref: image_ref.to_string(),
            content_hash: hash,
            width: img.width(),
            height: img.height(),
            late: false,
        }))
    }
}

#[derive(Debug, Default)]
pub struct ScanResult {
    pub events: Vec<FrameEvent>,
    pub skipped: Vec<(PathBuf, String)>,
    pub duplicates: usize,
}

#[async_trait]
pub trait FrameSource: Send {
    fn source_id(&self) -> &str;
    async fn poll(&mut self) -> ScanResult;
}

/// Polls a directory; each new or changed file is offered once.
pub struct DirectoryWatcher {
    source_id: String,
    dir: PathBuf,
    ingest: Arc<Ingest>,
    visited: HashMap<PathBuf, (Option<SystemTime>, u64)>,
}

impl DirectoryWatcher {
    pub fn new(source_id: impl Into<String>, dir: impl Into<PathBuf>, ingest: Arc<Ingest>) -> Self {
        Self {
            source_id: source_id.into(),
            dir: dir.into(),
            ingest,
            visited: HashMap::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn scan(&mut self) -> ScanResult {
        let mut out = ScanResult::default();
        let mut files: Vec<PathBuf> = match std::fs::read_dir(&self.dir) {
            Ok(rd) => rd
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
                .collect(),
            Err(e) => {
                tracing::warn!(dir = %self.dir.display(), error = %e, "cannot list watch directory");
                return out;
            }
        };
        files.sort();
        for path in files {
            let meta = std::fs::metadata(&path).ok();
            let key = (meta.as_ref().and_then(|m| m.modified().ok()), meta.as_ref().map_or(0, |m| m.len()));
            if self.visited.get(&path) == Some(&key) {
                continue;
            }
            self.visited.insert(path.clone(), key);
            let bytes = match std::fs::read(&path) {
                Ok(b) => b,
                Err(e) => {
                    out.skipped.push((path, e.to_string()));
                    continue;
                }
            };
            let ts = key.0.map(DateTime::<Utc>::from).unwrap_or_else(Utc::now);
            match self.ingest.admit(&self.source_id, &path.to_string_lossy(), &bytes, ts) {
                Ok(Some(ev)) => out.events.push(ev),
                Ok(None) => out.duplicates += 1,
                Err(e) => {
                    tracing::warn!(error = %e, "skipping frame");
                    out.skipped.push((path, e.to_string()));
                }
            }
        }
        out
    }
}

#[async_trait]
impl FrameSource for DirectoryWatcher {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    async fn poll(&mut self) -> ScanResult {
        self.scan()
    }
}

pub trait FrameSourceFactory: Send + Sync {
    fn build(&self, watch: &WatchSource, ingest: Arc<Ingest>) -> Box<dyn FrameSource>;
}

struct DirFactory;

impl FrameSourceFactory for DirFactory {
    fn build(&self, watch: &WatchSource, ingest: Arc<Ingest>) -> Box<dyn FrameSource> {
        Box::new(DirectoryWatcher::new(&watch.source_id, &watch.dir, ingest))
    }
}

pub fn default_frame_sources() -> Registry<dyn FrameSourceFactory> {
    let mut reg: Registry<dyn FrameSourceFactory> = Registry::new("frame source");
    reg.register("dir", Arc::new(DirFactory));
    reg
}
