//! Scene-generation and inpainting job descriptions for an external diffusion
//! backend. Jobs are plain data: building one is deterministic in its inputs,
//! and the serialized form is what the backend receives and what the artifact
//! sidecar echoes.

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::ClassId;
use crate::mask::{MaskSpec, DEFAULT_FEATHER_PX, DEFAULT_OPACITY};
use crate::prompts::PromptBank;
use crate::util::sha256_hex;

pub const LORA_STRENGTH_BAND: (f64, f64) = (0.2, 0.4);
pub const DENOISE_BAND: (f64, f64) = (0.5, 0.6);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field} = {value} is outside the allowed band {band}")]
pub struct BandError {
    /// Dotted config path, e.g. `generation.lora_strength`.
    pub field: String,
    pub value: f64,
    pub band: String,
}

fn check_band(field: &str, value: f64, lo: f64, hi: f64) -> Result<(), BandError> {
    if value.is_finite() && (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(BandError {
            field: field.to_string(),
            value,
            band: format!("[{lo}, {hi}]"),
        })
    }
}

fn check_exact(field: &str, value: f64, want: f64) -> Result<(), BandError> {
    check_band(field, value, want, want)
}

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error(transparent)]
    Band(#[from] BandError),
    #[error("mask is {mask_w}x{mask_h} but scene is {scene_w}x{scene_h}")]
    Geometry {
        scene_w: u32,
        scene_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("no inpainting prompts configured for class '{0}'")]
    MissingPrompt(String),
}

/// Stage-1 scene parameters. `lora_strength` left unset is drawn per job from
/// the seed, uniformly within the allowed band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationProfile {
    pub base_model: String,
    pub width: u32,
    pub height: u32,
    pub sampler: String,
    pub scheduler: String,
    pub steps: u32,
    pub cfg_scale: f64,
    pub lora_strength: Option<f64>,
    pub ip_adapter: String,
    pub ip_adapter_strength: f64,
}

impl Default for GenerationProfile {
    fn default() -> Self {
        Self {
            base_model: "stable-diffusion-xl-1.0".into(),
            width: 1024,
            height: 1024,
            sampler: "DDPM-SDE-2m-GPU".into(),
            scheduler: "Karras".into(),
            steps: 64,
            cfg_scale: 8.0,
            lora_strength: None,
            ip_adapter: "ip-composition+clip-vit-h".into(),
            ip_adapter_strength: 0.6,
        }
    }
}

fn check_dims(prefix: &str, w: u32, h: u32) -> Result<(), BandError> {
    for (name, v) in [("width", w), ("height", h)] {
        if v == 0 || v % 8 != 0 {
            return Err(BandError {
                field: format!("{prefix}.{name}"),
                value: v as f64,
                band: "positive multiple of 8".into(),
            });
        }
    }
    Ok(())
}

impl GenerationProfile {
    pub fn validate(&self) -> Result<(), BandError> {
        check_dims("generation", self.width, self.height)?;
        if self.steps == 0 {
            return Err(BandError {
                field: "generation.steps".into(),
                value: 0.0,
                band: ">= 1".into(),
            });
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale > 0.0) {
            return Err(BandError {
                field: "generation.cfg_scale".into(),
                value: self.cfg_scale,
                band: "> 0".into(),
            });
        }
        if let Some(s) = self.lora_strength {
            let (lo, hi) = LORA_STRENGTH_BAND;
            check_band("generation.lora_strength", s, lo, hi)?;
        }
        check_exact("generation.ip_adapter_strength", self.ip_adapter_strength, 0.6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintProfile {
    pub model: String,
    pub differential_diffusion: bool,
    pub feather_px: f64,
    pub opacity: f64,
    pub denoise_strength: Option<f64>,
    /// Name of a registered mask ramp.
    pub mask_ramp: String,
    pub variants_per_box: u32,
    pub ip_adapter_spill_ref: Option<String>,
}

impl Default for InpaintProfile {
    fn default() -> Self {
        Self {
            model: "sdxl-turbo-inpainting".into(),
            differential_diffusion: true,
            feather_px: DEFAULT_FEATHER_PX,
            opacity: DEFAULT_OPACITY,
            denoise_strength: None,
            mask_ramp: "linear".into(),
            variants_per_box: 1,
            ip_adapter_spill_ref: None,
        }
    }
}

impl InpaintProfile {
    pub fn validate(&self) -> Result<(), BandError> {
        if let Some(d) = self.denoise_strength {
            let (lo, hi) = DENOISE_BAND;
            check_band("inpaint.denoise_strength", d, lo, hi)?;
        }
        if !(self.feather_px.is_finite() && self.feather_px >= 0.0) {
            return Err(BandError {
                field: "inpaint.feather_px".into(),
                value: self.feather_px,
                band: ">= 0".into(),
            });
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(BandError {
                field: "inpaint.opacity".into(),
                value: self.opacity,
                band: "(0, 1]".into(),
            });
        }
        if self.variants_per_box == 0 {
            return Err(BandError {
                field: "inpaint.variants_per_box".into(),
                value: 0.0,
                band: ">= 1".into(),
            });
        }
        Ok(())
    }
}

/// A stored image the backend can fetch, with its pixel size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneJob {
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub base_model: String,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub cfg_scale: f64,
    pub sampler_id: String,
    pub scheduler_id: String,
    pub lora_strength: f64,
    pub ip_adapter: String,
    pub ip_adapter_strength: f64,
    pub style_ref: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintJob {
    pub scene_ref: String,
    pub mask_ref: String,
    pub mask: MaskSpec,
    pub mask_ramp: String,
    pub width: u32,
    pub height: u32,
    pub class_id: ClassId,
    pub class_name: String,
    pub model: String,
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub denoise_strength: f64,
    pub differential_diffusion: bool,
    /// Echoed so backends that apply opacity themselves can do so.
    pub mask_opacity: f64,
    pub ip_adapter_spill_ref: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Scene,
    Inpaint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionJob {
    Scene(SceneJob),
    Inpaint(InpaintJob),
}

impl DiffusionJob {
    pub fn kind(&self) -> JobKind {
        match self {
            DiffusionJob::Scene(_) => JobKind::Scene,
            DiffusionJob::Inpaint(_) => JobKind::Inpaint,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DiffusionJob::Scene(j) => j.seed,
            DiffusionJob::Inpaint(j) => j.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("jobs serialize")
    }

    /// Content address of the job: the first 16 hex digits of the SHA-256 of
    /// its serialized form.
    pub fn job_id(&self) -> String {
        sha256_hex(self.to_json().as_bytes())[..16].to_string()
    }
}

fn draw_in_band(seed: u64, salt: u64, (lo, hi): (f64, f64)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.random_range(lo..=hi)
}

const LORA_SALT: u64 = 0x6c6f_7261;
const DENOISE_SALT: u64 = 0x6465_6e6f;

pub fn build_scene_job(
    profile: &GenerationProfile,
    bank: &PromptBank,
    style_ref: &str,
    seed: u64,
) -> Result<SceneJob, BandError> {
    profile.validate()?;
    let lora_strength = profile
        .lora_strength
        .unwrap_or_else(|| draw_in_band(seed, LORA_SALT, LORA_STRENGTH_BAND));
    Ok(SceneJob {
        positive_prompt: bank.scene.positive.clone(),
        negative_prompt: bank.scene.negative.clone(),
        base_model: profile.base_model.clone(),
        width: profile.width,
        height: profile.height,
        steps: profile.steps,
        cfg_scale: profile.cfg_scale,
        sampler_id: profile.sampler.clone(),
        scheduler_id: profile.scheduler.clone(),
        lora_strength,
        ip_adapter: profile.ip_adapter.clone(),
        ip_adapter_strength: profile.ip_adapter_strength,
        style_ref: style_ref.to_string(),
        seed,
    })
}

/// The mask being paired with a scene: where it lives, what produced it and
/// its rendered size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRef {
    pub path: String,
    pub spec: MaskSpec,
    pub width: u32,
    pub height: u32,
}

pub fn build_inpaint_job(
    scene: &ImageRef,
    mask: &MaskRef,
    class_id: ClassId,
    class_name: &str,
    bank: &PromptBank,
    profile: &InpaintProfile,
    seed: u64,
) -> Result<InpaintJob, GenerationError> {
    profile.validate()?;
    if (mask.width, mask.height) != (scene.width, scene.height) {
        return Err(GenerationError::Geometry {
            scene_w: scene.width,
            scene_h: scene.height,
            mask_w: mask.width,
            mask_h: mask.height,
        });
    }
    let prompts = bank
        .inpaint_for(class_name)
        .ok_or_else(|| GenerationError::MissingPrompt(class_name.to_string()))?;
    let denoise_strength = profile
        .denoise_strength
        .unwrap_or_else(|| draw_in_band(seed, DENOISE_SALT, DENOISE_BAND));
    Ok(InpaintJob {
        scene_ref: scene.path.clone(),
        mask_ref: mask.path.clone(),
        mask: mask.spec,
        mask_ramp: profile.mask_ramp.clone(),
        width: scene.width,
        height: scene.height,
        class_id,
        class_name: class_name.to_string(),
        model: profile.model.clone(),
        positive_prompt: prompts.positive.clone(),
        negative_prompt: prompts.negative.clone(),
        denoise_strength,
        differential_diffusion: profile.differential_diffusion,
        mask_opacity: mask.spec.opacity,
        ip_adapter_spill_ref: profile.ip_adapter_spill_ref.clone(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("job {job_id}: illegal transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub job_id: String,
    pub from: JobStatus,
    pub to: JobStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub attempts: u32,
    pub artifact_path: Option<String>,
    pub sidecar_path: Option<String>,
    pub error: Option<String>,
    pub job: DiffusionJob,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl JobRecord {
    pub fn queued(job: DiffusionJob) -> Self {
        let now = Utc::now();
        Self {
            job_id: job.job_id(),
            kind: job.kind(),
            status: JobStatus::Queued,
            attempts: 0,
            artifact_path: None,
            sidecar_path: None,
            error: None,
            job,
            created_at: now,
            updated_at: now,
        }
    }

    /// Moves forward through queued -> running -> done | failed. Running may
    /// repeat (one per attempt); nothing moves backward or leaves a terminal state.
    pub fn advance(&mut self, to: JobStatus) -> Result<(), TransitionError> {
        let ok = match (self.status, to) {
            (JobStatus::Queued, JobStatus::Running) => true,
            (JobStatus::Running, JobStatus::Running) => true,
            (JobStatus::Queued | JobStatus::Running, JobStatus::Failed) => true,
            (JobStatus::Running, JobStatus::Done) => true,
            _ => false,
        };
        if !ok {
            return Err(TransitionError {
                job_id: self.job_id.clone(),
                from: self.status,
                to,
            });
        }
        self.status = to;
        self.updated_at = Utc::now();
        Ok(())
    }
}

/// Written next to every artifact. Deliberately timestamp-free so that a
/// rerun with the same seeds yields byte-identical sidecars; timing lives in
/// [`JobRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSidecar {
    pub job_id: String,
    pub artifact_sha256: String,
    pub job: DiffusionJob,
}

impl ArtifactSidecar {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("sidecar serializes");
        v.push(b'\n');
        v
    }
}
