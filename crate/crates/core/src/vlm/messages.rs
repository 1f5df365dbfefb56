use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataset::CocoAnnotation;
use crate::geometry::GroundTruth;
use crate::prompts::{PromptTemplate, TemplateError};
use crate::util::{sha256_hex, sniff_mime};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VlmError {
    #[error("unsupported shot count {k}; allowed: {allowed:?}")]
    ShotCount { k: usize, allowed: Vec<usize> },
    #[error("support example {0} has no ground-truth boxes")]
    EmptyExample(usize),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }
}

/// Image handed to the model, inline or by URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageInput {
    Bytes(Vec<u8>),
    Url(String),
}

impl ImageInput {
    pub fn to_url(&self) -> String {
        match self {
            ImageInput::Bytes(b) => format!(
                "data:{};base64,{}",
                sniff_mime(b),
                base64::engine::general_purpose::STANDARD.encode(b)
            ),
            ImageInput::Url(u) => u.clone(),
        }
    }

    /// Short stand-in used in logs instead of the full payload.
    pub fn digest(&self) -> String {
        match self {
            ImageInput::Bytes(b) => format!("sha256:{}", sha256_hex(b)),
            ImageInput::Url(u) => u.clone(),
        }
    }

    fn part(&self) -> ContentPart {
        ContentPart::ImageUrl {
            image_url: ImageUrl { url: self.to_url() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclExample {
    pub image_id: u64,
    pub image: ImageInput,
    pub ground_truths: Vec<GroundTruth>,
}

impl IclExample {
    /// The assistant answer for this example, as a COCO-style record list.
    pub fn answer_json(&self) -> String {
        let records: Vec<CocoAnnotation> = self
            .ground_truths
            .iter()
            .map(|g| CocoAnnotation {
                id: None,
                image_id: self.image_id,
                category_id: g.class_id,
                bbox: g.bbox.to_xywh(),
                score: Some(1.0),
                extra: Default::default(),
            })
            .collect();
        serde_json::to_string(&records).expect("records serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IclSupportSet {
    pub examples: Vec<IclExample>,
}

impl IclSupportSet {
    pub fn k(&self) -> usize {
        self.examples.len()
    }
}

/// Which support-set sizes are accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShotPolicy {
    pub allowed: Vec<usize>,
    pub allow_any: bool,
}

impl Default for ShotPolicy {
    fn default() -> Self {
        Self {
            allowed: vec![5, 10, 15],
            allow_any: false,
        }
    }
}

/// System persona, then one (user, assistant) pair per support example, then
/// the query. Always `2 + 2k` messages.
pub fn build_messages(
    template: &PromptTemplate,
    image: &ImageInput,
    class_name: &str,
    support: Option<&IclSupportSet>,
    policy: &ShotPolicy,
) -> Result<Vec<ChatMessage>, VlmError> {
    template.validate()?;
    let request = template.render_user(class_name);
    let mut msgs = vec![ChatMessage::text(Role::System, template.system_text.clone())];
    if let Some(s) = support {
        let k = s.k();
        if !policy.allow_any && !policy.allowed.contains(&k) {
            return Err(VlmError::ShotCount {
                k,
                allowed: policy.allowed.clone(),
            });
        }
        for (i, ex) in s.examples.iter().enumerate() {
            if ex.ground_truths.is_empty() {
                return Err(VlmError::EmptyExample(i));
            }
            msgs.push(ChatMessage {
                role: Role::User,
                content: vec![ex.image.part(), ContentPart::Text { text: request.clone() }],
            });
            msgs.push(ChatMessage::text(Role::Assistant, ex.answer_json()));
        }
    }
    msgs.push(ChatMessage {
        role: Role::User,
        content: vec![image.part(), ContentPart::Text { text: request }],
    });
    Ok(msgs)
}
