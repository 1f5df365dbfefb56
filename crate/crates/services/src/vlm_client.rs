//! Chat-completions client that answers detection requests from a hosted
//! vision-language model.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};
use spillkit_core::config::VlmConfig;
use spillkit_core::detector::{DetectError, DetectRequest, Detector, DetectorSource, DetectorSpec};
use spillkit_core::prompts::{DecodingParams, PromptTemplate};
use spillkit_core::vlm::{
    build_messages, parse_response_with, ChatMessage, IclExample, IclSupportSet, ImageInput,
    ParseOptions, ParsedDetections, ReplayEntry, ReplayWriter, ShotPolicy,
};

const OVERFLOW_MARKERS: &[&str] = &[
    "context_length_exceeded",
    "maximum context length",
    "context length",
    "too many tokens",
    "prompt is too long",
];

pub struct VlmClient {
    http: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    template: PromptTemplate,
    decoding: DecodingParams,
    shots: ShotPolicy,
    support: Option<IclSupportSet>,
    parse: ParseOptions,
    max_request_bytes: Option<usize>,
    replay: Option<Arc<ReplayWriter>>,
    label: String,
}

impl VlmClient {
    pub fn from_config(cfg: &VlmConfig) -> Result<Self, DetectError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_millis(cfg.request_timeout_ms))
            .build()
            .map_err(|e| DetectError::Setup(e.to_string()))?;
        let replay = cfg
            .replay_log
            .as_deref()
            .map(|p| ReplayWriter::open(p).map(Arc::new))
            .transpose()
            .map_err(|e| DetectError::Setup(format!("replay log: {e}")))?;
        Ok(Self {
            http,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
            template: cfg.template.clone(),
            decoding: cfg.decoding.clone(),
            shots: cfg.shots.clone(),
            support: None,
            parse: ParseOptions {
                ceiling: cfg.coordinate_ceiling,
                class_hint: None,
            },
            max_request_bytes: cfg.max_request_bytes,
            replay,
            label: format!("vlm:{}", cfg.model),
        })
    }

    /// Conditions every request on `support` (in-context examples).
    pub fn with_support(mut self, support: IclSupportSet) -> Result<Self, DetectError> {
        let probe = ImageInput::Url(String::new());
        build_messages(&self.template, &probe, "probe", Some(&support), &self.shots)
            .map_err(|e| DetectError::Setup(e.to_string()))?;
        self.support = Some(support);
        Ok(self)
    }

    fn messages(&self, image: &ImageInput, class_name: &str, support: Option<&IclSupportSet>) -> Result<Vec<ChatMessage>, DetectError> {
        build_messages(&self.template, image, class_name, support, &self.shots)
            .map_err(|e| DetectError::Setup(e.to_string()))
    }

    /// The exact JSON body sent for `req`.
    pub fn request_body(&self, req: &DetectRequest) -> Result<Value, DetectError> {
        let image = req
            .image
            .as_ref()
            .ok_or_else(|| DetectError::Image(req.image_id, "request carries no image".into()))?;
        let messages = self.messages(image, &req.class_name, self.support.as_ref())?;
        Ok(self.wrap(messages))
    }

    fn wrap(&self, messages: Vec<ChatMessage>) -> Value {
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.decoding.temperature,
            "top_p": self.decoding.top_p,
            "repetition_penalty": self.decoding.repetition_penalty,
            "max_tokens": self.decoding.max_tokens,
        })
    }

    /// Same body with every inline image replaced by its digest, for the replay log.
    fn logged_body(&self, req: &DetectRequest) -> Option<Value> {
        let image = ImageInput::Url(req.image.as_ref()?.digest());
        let support = self.support.as_ref().map(|s| IclSupportSet {
            examples: s
                .examples
                .iter()
                .map(|e| IclExample {
                    image: ImageInput::Url(e.image.digest()),
                    ..e.clone()
                })
                .collect(),
        });
        self.messages(&image, &req.class_name, support.as_ref()).ok().map(|m| self.wrap(m))
    }

    fn log(&self, req: &DetectRequest, response_text: Option<String>, error: Option<String>) {
        if let Some(w) = &self.replay {
            let entry = ReplayEntry {
                image_id: req.image_id,
                class_id: req.class_id,
                request: self.logged_body(req),
                response_text,
                error,
            };
            if let Err(e) = w.append(&entry) {
                tracing::warn!(error = %e, "replay log append failed");
            }
        }
    }

    async fn call(&self, body: &Value) -> Result<String, DetectError> {
        let bytes = serde_json::to_vec(body).expect("request serializes");
        if let Some(limit) = self.max_request_bytes {
            if bytes.len() > limit {
                return Err(DetectError::ContextOverflow(format!(
                    "request is {} bytes, limit {limit}",
                    bytes.len()
                )));
            }
        }
        let mut rb = self
            .http
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(bytes);
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb.send().await.map_err(|e| DetectError::Transport(e.to_string()))?;
        let code = resp.status();
        let text = resp.text().await.map_err(|e| DetectError::Transport(e.to_string()))?;
        if !code.is_success() {
            let lower = text.to_lowercase();
            if code.as_u16() == 413 || OVERFLOW_MARKERS.iter().any(|m| lower.contains(m)) {
                return Err(DetectError::ContextOverflow(text));
            }
            if code.is_server_error() || code.as_u16() == 429 {
                return Err(DetectError::Transport(format!("HTTP {code}: {text}")));
            }
            return Err(DetectError::Backend(format!("HTTP {code}: {text}")));
        }
        completion_text(&text)
    }
}

/// Pulls the assistant text out of a chat-completions response.
pub fn completion_text(body: &str) -> Result<String, DetectError> {
    let v: Value = serde_json::from_str(body).map_err(|e| DetectError::Backend(format!("response JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| DetectError::Backend("response has no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        Value::Null => Ok(String::new()),
        other => Err(DetectError::Backend(format!("unexpected content {other}"))),
    }
}

#[async_trait]
impl Detector for VlmClient {
    fn name(&self) -> &str {
        &self.label
    }

    fn needs_image(&self) -> bool {
        true
    }

    async fn detect(&self, req: &DetectRequest) -> Result<ParsedDetections, DetectError> {
        let body = self.request_body(req)?;
        match self.call(&body).await {
            Ok(text) => {
                let opts = ParseOptions {
                    class_hint: Some(req.class_id),
                    ..self.parse
                };
                let parsed = parse_response_with(&text, req.width, req.height, &opts);
                self.log(req, Some(text), None);
                Ok(parsed)
            }
            Err(e) => {
                self.log(req, None, Some(e.to_string()));
                Err(e)
            }
        }
    }
}

/// Registers the live model under the name `vlm`.
pub struct VlmSource {
    pub config: VlmConfig,
    pub support: Option<IclSupportSet>,
}

impl DetectorSource for VlmSource {
    fn build(&self, _spec: &DetectorSpec) -> Result<Arc<dyn Detector>, DetectError> {
        let client = VlmClient::from_config(&self.config)?;
        let client = match &self.support {
            Some(s) => client.with_support(s.clone())?,
            None => client,
        };
        Ok(Arc::new(client))
    }
}

pub fn detector_sources(
    config: &VlmConfig,
    support: Option<IclSupportSet>,
) -> spillkit_core::registry::Registry<dyn DetectorSource> {
    let mut reg = spillkit_core::detector::default_detector_sources();
    reg.register(
        "vlm",
        Arc::new(VlmSource {
            config: config.clone(),
            support,
        }),
    );
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completion_shapes() {
        let s = r#"{"choices":[{"message":{"role":"assistant","content":"[]"}}]}"#;
        assert_eq!(completion_text(s).unwrap(), "[]");
        let parts = r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#;
        assert_eq!(completion_text(parts).unwrap(), "ab");
        assert!(completion_text("{}").is_err());
    }
}
