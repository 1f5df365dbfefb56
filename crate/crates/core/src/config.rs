//! The single JSON configuration file shared by every command. Every section
//! is optional and falls back to the defaults below; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, ClassRegistry};
use crate::generation::{GenerationProfile, InpaintProfile};
use crate::mask::default_mask_ramps;
use crate::metrics::default_matching_rules;
use crate::monitor::{PolicyError, SeverityRules, ThresholdPolicy};
use crate::prompts::{DecodingParams, PromptBank, PromptTemplate, TemplateError};
use crate::vlm::{ShotPolicy, DEFAULT_CEILING};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config field {field}: {message}")]
    Parse { field: String, message: String },
    #[error("config field {field}: {message}")]
    Band { field: String, message: String },
}

impl ConfigError {
    /// Dotted path of the offending field, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Parse { field, .. } | ConfigError::Band { field, .. } => Some(field),
            ConfigError::Io { .. } => None,
        }
    }

    fn band(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Band {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub max_attempts: u32,
    /// First backoff delay; each further retry doubles it.
    pub backoff_base_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Registered backend adapter name.
    pub backend: String,
    pub endpoint: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: String,
    pub parallelism: usize,
    pub retry: RetryConfig,
    pub poll_interval_ms: u64,
    pub max_polls: u32,
    pub request_timeout_ms: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            backend: "rest".into(),
            endpoint: "http://127.0.0.1:7860".into(),
            api_key_env: "SPILLKIT_DIFFUSION_KEY".into(),
            parallelism: 4,
            retry: RetryConfig::default(),
            poll_interval_ms: 500,
            max_polls: 600,
            request_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub template: PromptTemplate,
    pub decoding: DecodingParams,
    pub coordinate_ceiling: f64,
    pub shots: ShotPolicy,
    pub request_timeout_ms: u64,
    /// Requests whose body exceeds this many bytes are refused locally as a
    /// context overflow instead of being sent.
    pub max_request_bytes: Option<usize>,
    pub replay_log: Option<PathBuf>,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "qwen2.5-vl-7b-instruct".into(),
            api_key_env: "SPILLKIT_VLM_KEY".into(),
            template: PromptTemplate::default(),
            decoding: DecodingParams::default(),
            coordinate_ceiling: DEFAULT_CEILING,
            shots: ShotPolicy::default(),
            request_timeout_ms: 60_000,
            max_request_bytes: None,
            replay_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau: f64,
    pub thresholds: Vec<f64>,
    pub matching_rule: String,
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            matching_rule: "best-score".into(),
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SinkConfig {
    Webhook {
        url: String,
        #[serde(default = "default_sink_attempts")]
        max_attempts: u32,
        #[serde(default = "default_sink_backoff")]
        backoff_ms: u64,
    },
    Log {
        path: PathBuf,
    },
}

fn default_sink_attempts() -> u32 {
    3
}

fn default_sink_backoff() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatchSource {
    pub source_id: String,
    pub dir: PathBuf,
    /// Registered frame-source kind.
    #[serde(default = "default_watch_kind")]
    pub kind: String,
}

fn default_watch_kind() -> String {
    "dir".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub policy: ThresholdPolicy,
    pub severity: SeverityRules,
    pub watch: Vec<WatchSource>,
    pub poll_interval_ms: u64,
    pub listen: String,
    pub queue_capacity: usize,
    pub detection_parallelism: usize,
    /// Extra detection attempts for a frame after the first failure.
    pub frame_retries: u32,
    pub retry_backoff_ms: u64,
    /// Classes queried per frame; defaults to every registered class.
    pub query_classes: Option<Vec<ClassId>>,
    pub sinks: Vec<SinkConfig>,
    pub detection_log: PathBuf,
    pub dead_letter: PathBuf,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            policy: ThresholdPolicy::default(),
            severity: SeverityRules::default(),
            watch: Vec::new(),
            poll_interval_ms: 1000,
            listen: "127.0.0.1:8091".into(),
            queue_capacity: 64,
            detection_parallelism: 2,
            frame_retries: 2,
            retry_backoff_ms: 200,
            query_classes: None,
            sinks: vec![SinkConfig::Log {
                path: "monitor/alerts.jsonl".into(),
            }],
            detection_log: "monitor/detections.jsonl".into(),
            dead_letter: "monitor/dead_letter.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Environment variable holding the shared token; unset disables the check.
    pub token_env: String,
    pub ui_dir: Option<PathBuf>,
    pub max_rejects: u32,
    pub page_size: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8090".into(),
            data_dir: "annotation".into(),
            token_env: "SPILLKIT_ANNOTATION_TOKEN".into(),
            ui_dir: None,
            max_rejects: 3,
            page_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub classes: ClassRegistry,
    pub prompts: PromptBank,
    pub generation: GenerationProfile,
    pub inpaint: InpaintProfile,
    pub diffusion: DiffusionConfig,
    pub vlm: VlmConfig,
    pub eval: EvalConfig,
    pub monitor: MonitorConfig,
    pub annotation: AnnotationConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            classes: ClassRegistry::default(),
            prompts: PromptBank::default(),
            generation: GenerationProfile::default(),
            inpaint: InpaintProfile::default(),
            diffusion: DiffusionConfig::default(),
            vlm: VlmConfig::default(),
            eval: EvalConfig::default(),
            monitor: MonitorConfig::default(),
            annotation: AnnotationConfig::default(),
            output_dir: "out".into(),
            seed: 0,
        }
    }
}

fn template_error(e: TemplateError) -> ConfigError {
    match e {
        TemplateError::EmptySystem => ConfigError::band("vlm.template.system_text", e.to_string()),
        TemplateError::Placeholder(_) => {
            ConfigError::band("vlm.template.user_pattern", e.to_string())
        }
        TemplateError::Decoding { field, .. } => {
            ConfigError::band(format!("vlm.decoding.{field}"), e.to_string())
        }
    }
}

fn policy_error(e: PolicyError) -> ConfigError {
    match &e {
        PolicyError::Threshold { field, .. } => ConfigError::band(field.clone(), e.to_string()),
        PolicyError::Severity(f) => ConfigError::band(format!("monitor.severity.{f}"), e.to_string()),
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Checks every section against its allowed bands, naming the first
    /// offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.generation
            .validate()
            .map_err(|e| ConfigError::band(e.field.clone(), e.to_string()))?;
        self.inpaint
            .validate()
            .map_err(|e| ConfigError::band(e.field.clone(), e.to_string()))?;
        if !default_mask_ramps().contains(&self.inpaint.mask_ramp) {
            return Err(ConfigError::band(
                "inpaint.mask_ramp",
                format!("unknown ramp '{}'", self.inpaint.mask_ramp),
            ));
        }
        self.vlm.template.validate().map_err(template_error)?;
        self.vlm.decoding.validate().map_err(template_error)?;
        if !(self.vlm.coordinate_ceiling.is_finite() && self.vlm.coordinate_ceiling >= 0.0) {
            return Err(ConfigError::band("vlm.coordinate_ceiling", "must be >= 0 (0 disables rescaling)"));
        }
        if self.diffusion.parallelism == 0 {
            return Err(ConfigError::band("diffusion.parallelism", "must be >= 1"));
        }
        if self.diffusion.retry.max_attempts == 0 {
            return Err(ConfigError::band("diffusion.retry.max_attempts", "must be >= 1"));
        }
        if !(self.eval.tau > 0.0 && self.eval.tau <= 1.0) {
            return Err(ConfigError::band("eval.tau", "must lie in (0, 1]"));
        }
        let sorted = self.eval.thresholds.windows(2).all(|w| w[0] < w[1])
            && self.eval.thresholds.iter().all(|t| *t > 0.0 && *t <= 1.0);
        if !sorted {
            return Err(ConfigError::band(
                "eval.thresholds",
                "must be strictly increasing within (0, 1]",
            ));
        }
        if !default_matching_rules().contains(&self.eval.matching_rule) {
            return Err(ConfigError::band(
                "eval.matching_rule",
                format!("unknown rule '{}'", self.eval.matching_rule),
            ));
        }
        if self.eval.parallelism == 0 {
            return Err(ConfigError::band("eval.parallelism", "must be >= 1"));
        }
        self.monitor.policy.validate().map_err(policy_error)?;
        self.monitor.severity.validate().map_err(policy_error)?;
        if self.monitor.queue_capacity == 0 || self.monitor.detection_parallelism == 0 {
            return Err(ConfigError::band(
                "monitor.queue_capacity",
                "queue capacity and detection parallelism must be >= 1",
            ));
        }
        for c in self.monitor.query_classes.iter().flatten() {
            if !self.classes.contains(*c) {
                return Err(ConfigError::band(
                    "monitor.query_classes",
                    format!("class {c} is not registered"),
                ));
            }
        }
        for c in self.monitor.policy.per_class.keys() {
            if !self.classes.contains(*c) {
                return Err(ConfigError::band(
                    format!("monitor.policy.per_class.{c}"),
                    "class is not registered",
                ));
            }
        }
        for name in self.prompts.inpaint.keys() {
            if self.classes.id_of(name).is_err() {
                return Err(ConfigError::band(
                    format!("prompts.inpaint.{name}"),
                    "class is not registered",
                ));
            }
        }
        if self.annotation.max_rejects == 0 || self.annotation.page_size == 0 {
            return Err(ConfigError::band(
                "annotation.max_rejects",
                "max_rejects and page_size must be >= 1",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(Config::from_json(&s).unwrap(), c);
        assert_eq!(Config::from_json("{}").unwrap(), c);
    }

    #[test]
    fn band_violation_names_field() {
        let e = Config::from_json(r#"{"generation": {"lora_strength": 0.9}}"#).unwrap_err();
        assert_eq!(e.field(), Some("generation.lora_strength"));
        let e = Config::from_json(r#"{"inpaint": {"denoise_strength": 0.7}}"#).unwrap_err();
        assert_eq!(e.field(), Some("inpaint.denoise_strength"));
        let e = Config::from_json(r#"{"vlm": {"decoding": {"top_p": 0}}}"#).unwrap_err();
        assert_eq!(e.field(), Some("vlm.decoding.top_p"));
    }

    #[test]
    fn parse_errors_name_field() {
        let e = Config::from_json(r#"{"eval": {"tau": "half"}}"#).unwrap_err();
        assert_eq!(e.field(), Some("eval.tau"));
        let e = Config::from_json(r#"{"generaton": {}}"#).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { .. }));
    }

    #[test]
    fn per_class_thresholds() {
        let c = Config::from_json(r#"{"monitor": {"policy": {"per_class": {"1": 0.8}}}}"#).unwrap();
        assert_eq!(c.monitor.policy.threshold(ClassId(1)), 0.8);
        assert_eq!(c.monitor.policy.threshold(ClassId(2)), 0.5);
        let e = Config::from_json(r#"{"monitor": {"policy": {"per_class": {"1": 1.5}}}}"#)
            .unwrap_err();
        assert_eq!(e.field(), Some("monitor.policy.per_class.1"));
    }
}
