use serde_json::{json, Value};
use spillkit_core::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {message}")]
    Failed { context: String, message: String },
}

impl CliError {
    pub fn failed(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        CliError::Failed {
            context: context.into(),
            message: err.to_string(),
        }
    }

    /// 2 for usage mistakes, 3 when the config is rejected, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(ConfigError::Io { .. }) => 1,
            CliError::Config(_) => 3,
            CliError::Failed { .. } => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let kind = match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Failed { .. } => "failed",
        };
        let field = match self {
            CliError::Config(c) => c.field().map(str::to_string),
            _ => None,
        };
        json!({
            "kind": kind,
            "exit_code": self.exit_code(),
            "field": field,
            "message": self.to_string(),
        })
    }
}
