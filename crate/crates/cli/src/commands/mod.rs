pub mod data;
pub mod eval;
pub mod gen;
pub mod lora;
pub mod serve;

use std::path::Path;

use serde::Serialize;
use spillkit_core::config::Config;
use spillkit_core::dataset::{parse_coco, CocoDataset};
use spillkit_core::util::write_atomic;

use crate::error::CliError;

pub fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

/// Re-checks the config after command-line overrides were applied.
pub fn revalidate(cfg: &Config) -> Result<(), CliError> {
    cfg.validate().map_err(CliError::from)
}

#[derive(Debug, Clone, Copy)]
pub struct Output {
    pub json: bool,
}

impl Output {
    /// Prints `value` as one JSON document, or `text` otherwise.
    pub fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Result<(), CliError> {
        if self.json {
            let s = serde_json::to_string(value).map_err(|e| CliError::failed("serializing output", e))?;
            println!("{s}");
        } else {
            let t = text();
            if !t.is_empty() {
                println!("{}", t.trim_end());
            }
        }
        Ok(())
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::failed(path.display().to_string(), e))
}

pub fn read_coco(path: &Path) -> Result<CocoDataset, CliError> {
    let parsed = parse_coco(&read_bytes(path)?).map_err(|e| CliError::failed(path.display().to_string(), e))?;
    for w in &parsed.warnings {
        tracing::warn!(file = %path.display(), warning = ?w, "dataset warning");
    }
    Ok(parsed.dataset)
}

pub fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| CliError::failed(path.display().to_string(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::failed("serializing", e))?;
    write_file(path, &bytes)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::failed(path.display().to_string(), e))
}
