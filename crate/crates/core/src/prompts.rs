//! Prompt banks for scene generation, spill inpainting and the detection model,
//! plus the decoding parameters sent with every detection request.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const SCENE_POSITIVE: &str =
    "A factory interior, close-up of industrial equipment, image captured via a colored high-quality high-end inspection camera, clear mechanical details, realistic metallic textures, authentic lighting, natural industrial setting, accurate machinery components, subtle equipment variations, realistic wear and tear.";

pub const SCENE_NEGATIVE: &str =
    "Text, watermark, low quality, jitter, nsfw, stickers, labels, blurred details, distorted equipment, cartoonish or unrealistic textures, unnatural colors, overly bright lighting, irrelevant objects, human presence, animals, plants, visible text, duplicated or repeated elements, unrealistic proportions, overly polished surfaces, plastic-like or artificial appearance.";

pub const OIL_SPILL_POSITIVE: &str =
    "Realistic oil spill in factory with brown or black stains, industrial scene with dark oil leakage stains, brown-black oily patch on factory floor, factory oil spill with realistic black sludge, realistic factory environment with oil smears, black or brown oil leakage on industrial surface, dirty oil-stained floor in realistic factory, blackened spill area in a manufacturing plant, authentic oil spill marks on brown concrete, industrial realism with black or brown oil spill.";

pub const OIL_SPILL_NEGATIVE: &str =
    "Cartoon, anime, illustration, painting, drawing, lowres, blurry, pixelated, overexposed, unrealistic, stylized, clipart, animated, text, watermark, signature, frame, border, extra limbs, distorted hands, shiny, plastic, toy-like, glossy, yellow tint, white overlay, newspaper texture, poster art, human figures, fingers, deformed body parts, 3D render, CGI, artifact, sketch.";

pub const INSPECTOR_SYSTEM: &str =
    "You are a certified industrial safety inspector specializing in hazardous spill, leak, and stain detection across factories and energy plants. Only report verifiable safety hazards. Do not guess or speculate.";

pub const DETECT_USER_PATTERN: &str =
    "Detect and return the bounding-box coordinates of the {class} in COCO JSON format, if present.";

/// Appended to the user request so the model reports a confidence per box.
pub const SCORE_REQUEST: &str = "Include a \"score\" field between 0 and 1 for each box.";

pub const CLASS_PLACEHOLDER: &str = "{class}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptBank {
    pub scene: PromptPair,
    /// Inpainting prompts keyed by class name.
    pub inpaint: BTreeMap<String, PromptPair>,
}

impl Default for PromptBank {
    fn default() -> Self {
        Self {
            scene: PromptPair {
                positive: SCENE_POSITIVE.into(),
                negative: SCENE_NEGATIVE.into(),
            },
            inpaint: BTreeMap::from([(
                "oil-spill".to_string(),
                PromptPair {
                    positive: OIL_SPILL_POSITIVE.into(),
                    negative: OIL_SPILL_NEGATIVE.into(),
                },
            )]),
        }
    }
}

impl PromptBank {
    pub fn inpaint_for(&self, class_name: &str) -> Option<&PromptPair> {
        self.inpaint.get(class_name)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("system prompt is empty")]
    EmptySystem,
    #[error("user pattern must contain exactly one {{class}} placeholder, found {0}")]
    Placeholder(usize),
    #[error("invalid decoding parameter {field}: {value}")]
    Decoding { field: &'static str, value: f64 },
}

/// Inspector persona plus the per-class detection request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub system_text: String,
    pub user_pattern: String,
    pub score_request: Option<String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_text: INSPECTOR_SYSTEM.into(),
            user_pattern: DETECT_USER_PATTERN.into(),
            score_request: Some(SCORE_REQUEST.into()),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.system_text.trim().is_empty() {
            return Err(TemplateError::EmptySystem);
        }
        match self.user_pattern.matches(CLASS_PLACEHOLDER).count() {
            1 => Ok(()),
            n => Err(TemplateError::Placeholder(n)),
        }
    }

    pub fn render_user(&self, class_name: &str) -> String {
        let base = self.user_pattern.replace(CLASS_PLACEHOLDER, class_name);
        match &self.score_request {
            Some(extra) if !extra.is_empty() => format!("{base} {extra}"),
            _ => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.10,
            top_p: 0.001,
            repetition_penalty: 1.2,
            max_tokens: 512,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(TemplateError::Decoding {
                field: "temperature",
                value: self.temperature,
            });
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(TemplateError::Decoding {
                field: "top_p",
                value: self.top_p,
            });
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty > 0.0) {
            return Err(TemplateError::Decoding {
                field: "repetition_penalty",
                value: self.repetition_penalty,
            });
        }
        Ok(())
    }
}
