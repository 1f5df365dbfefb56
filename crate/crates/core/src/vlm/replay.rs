//! JSON-lines log of model exchanges, one line per (image, class) query.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classes::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub image_id: u64,
    pub class_id: ClassId,
    /// Request body as sent, with inline images replaced by their digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Value>,
    /// Model reply; absent when the call failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("replay log line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("replay log: {0}")]
    Io(#[from] std::io::Error),
}

/// In-memory index of a replay log. Later lines win for repeated keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayLog {
    entries: BTreeMap<(u64, ClassId), ReplayEntry>,
}

impl ReplayLog {
    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|e| ((e.image_id, e.class_id), e))
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ReplayError> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(line).map_err(|e| ReplayError::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(e);
        }
        Ok(Self::from_entries(out))
    }

    pub fn get(&self, image_id: u64, class_id: ClassId) -> Option<&ReplayEntry> {
        self.entries.get(&(image_id, class_id))
    }

    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().map(|(i, _)| *i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.values()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .values()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

pub fn read_replay_log(path: &Path) -> Result<ReplayLog, ReplayError> {
    let mut text = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    ReplayLog::parse(&text)
}

/// Append-only writer; concurrent callers are serialized line by line.
#[derive(Debug)]
pub struct ReplayWriter {
    file: Mutex<File>,
}

impl ReplayWriter {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, entry: &ReplayEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(entry).expect("entry serializes");
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line)?;
        f.flush()
    }
}
