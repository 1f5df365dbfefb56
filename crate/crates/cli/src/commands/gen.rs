use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use spillkit_core::config::Config;
use spillkit_core::generation::{
    build_inpaint_job, build_scene_job, DiffusionJob, ImageRef, JobRecord, JobStatus, MaskRef,
};
use spillkit_core::mask::{default_mask_ramps, render_mask_with, save_mask, sidecar_path, MaskSidecar, MaskSpec};
use spillkit_services::diffusion::Orchestrator;

use super::{read_coco, read_json, revalidate, Output};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Diffusion backend base URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Jobs in flight at once.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Attempts per job, including the first.
    #[arg(long)]
    retries: Option<u32>,
}

impl BackendArgs {
    fn apply(&self, cfg: &mut Config) {
        if let Some(e) = &self.endpoint {
            cfg.diffusion.endpoint = e.clone();
        }
        if let Some(p) = self.parallelism {
            cfg.diffusion.parallelism = p;
        }
        if let Some(r) = self.retries {
            cfg.diffusion.retry.max_attempts = r;
        }
    }
}

#[derive(Debug, Args)]
pub struct ScenesArgs {
    /// Number of scenes; seeds run consecutively from --seed.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Style reference image handed to the image-prompt adapter.
    #[arg(long)]
    style_ref: String,
    /// First seed; defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `<output_dir>/scenes`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Serialize)]
pub struct BatchSummary {
    pub done: usize,
    pub failed: usize,
    pub records: Vec<JobRecord>,
}

fn summarize(records: Vec<JobRecord>) -> BatchSummary {
    let done = records.iter().filter(|r| r.status == JobStatus::Done).count();
    BatchSummary {
        done,
        failed: records.len() - done,
        records,
    }
}

async fn run_jobs(cfg: &Config, jobs: Vec<DiffusionJob>, out_dir: &Path, out: Output) -> Result<(), CliError> {
    let orch = Orchestrator::from_config(&cfg.diffusion, out_dir).map_err(|e| CliError::failed("diffusion backend", e))?;
    let n = jobs.len();
    let summary = summarize(orch.run_batch(jobs, cfg.diffusion.parallelism).await);
    out.emit(&summary, || {
        let mut s = format!("{} of {n} jobs done, {} failed\n", summary.done, summary.failed);
        for r in &summary.records {
            match (&r.artifact_path, &r.error) {
                (Some(p), _) => s.push_str(&format!("{} {p}\n", r.job_id)),
                (None, e) => s.push_str(&format!("{} failed: {}\n", r.job_id, e.as_deref().unwrap_or("unknown"))),
            }
        }
        s
    })?;
    if n > 0 && summary.done == 0 {
        return Err(CliError::failed("diffusion batch", "every job failed"));
    }
    Ok(())
}

pub async fn scenes(mut cfg: Config, args: ScenesArgs, out: Output) -> Result<(), CliError> {
    args.backend.apply(&mut cfg);
    revalidate(&cfg)?;
    let first = args.seed.unwrap_or(cfg.seed);
    let jobs = (first..first + args.count)
        .map(|seed| build_scene_job(&cfg.generation, &cfg.prompts, &args.style_ref, seed).map(DiffusionJob::Scene))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::failed("building scene jobs", e))?;
    let dir = args.out.unwrap_or_else(|| cfg.output_dir.join("scenes"));
    run_jobs(&cfg, jobs, &dir, out).await
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    /// COCO file whose boxes become masks.
    #[arg(long)]
    coco: PathBuf,
    /// Output directory; defaults to `<output_dir>/masks`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    feather: Option<f64>,
    #[arg(long)]
    opacity: Option<f64>,
    /// Registered ramp name, e.g. `linear` or `gaussian`.
    #[arg(long)]
    ramp: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct MaskOutput {
    pub image_id: u64,
    pub annotation_id: u64,
    pub path: String,
}

fn stem(file_name: &str) -> String {
    Path::new(file_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file_name.to_string())
}

fn mask_file(dir: &Path, file_name: &str, annotation_id: u64) -> PathBuf {
    dir.join(format!("{}_{annotation_id}.png", stem(file_name)))
}

pub fn masks(mut cfg: Config, args: MasksArgs, out: Output) -> Result<(), CliError> {
    if let Some(f) = args.feather {
        cfg.inpaint.feather_px = f;
    }
    if let Some(o) = args.opacity {
        cfg.inpaint.opacity = o;
    }
    if let Some(r) = &args.ramp {
        cfg.inpaint.mask_ramp = r.clone();
    }
    revalidate(&cfg)?;
    let ramp = default_mask_ramps()
        .get(&cfg.inpaint.mask_ramp)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = read_coco(&args.coco)?;
    let dir = args.out.unwrap_or_else(|| cfg.output_dir.join("masks"));
    let mut written = Vec::new();
    for (i, a) in ds.annotations.iter().enumerate() {
        let img = ds.image(a.image_id).ok_or_else(|| CliError::failed("dataset", format!("no image {}", a.image_id)))?;
        let bbox = a.to_bbox().map_err(|e| CliError::failed("annotation", e))?;
        let spec = MaskSpec::new(bbox, cfg.inpaint.feather_px, cfg.inpaint.opacity)
            .map_err(|e| CliError::failed("mask", e))?;
        let mask = render_mask_with(ramp.as_ref(), &spec, img.width, img.height)
            .map_err(|e| CliError::failed(format!("mask for annotation {i}"), e))?;
        let ann_id = a.id.unwrap_or(i as u64 + 1);
        let path = mask_file(&dir, &img.file_name, ann_id);
        save_mask(&mask, &spec, &cfg.inpaint.mask_ramp, &path).map_err(|e| CliError::failed(path.display().to_string(), e))?;
        written.push(MaskOutput {
            image_id: a.image_id,
            annotation_id: ann_id,
            path: path.to_string_lossy().into_owned(),
        });
    }
    out.emit(&written, || written.iter().map(|m| format!("{}\n", m.path)).collect())
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    /// JSON array of prepared jobs.
    #[arg(long, conflicts_with_all = ["coco", "scene_dir", "mask_dir"])]
    batch: Option<PathBuf>,
    /// COCO file naming scenes and boxes; one job per box.
    #[arg(long, requires_all = ["scene_dir", "mask_dir"])]
    coco: Option<PathBuf>,
    #[arg(long)]
    scene_dir: Option<PathBuf>,
    /// Directory written by `make-masks`.
    #[arg(long)]
    mask_dir: Option<PathBuf>,
    /// First seed; defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `<output_dir>/inpainted`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

fn jobs_from_coco(cfg: &Config, coco: &Path, scene_dir: &Path, mask_dir: &Path, seed: u64) -> Result<Vec<DiffusionJob>, CliError> {
    let ds = read_coco(coco)?;
    let mut jobs = Vec::new();
    for (i, a) in ds.annotations.iter().enumerate() {
        let img = ds.image(a.image_id).ok_or_else(|| CliError::failed("dataset", format!("no image {}", a.image_id)))?;
        let scene = ImageRef {
            path: scene_dir.join(&img.file_name).to_string_lossy().into_owned(),
            width: img.width,
            height: img.height,
        };
        let path = mask_file(mask_dir, &img.file_name, a.id.unwrap_or(i as u64 + 1));
        let side: MaskSidecar = read_json(&sidecar_path(&path))?;
        let mask = MaskRef {
            path: path.to_string_lossy().into_owned(),
            spec: side.spec,
            width: side.width,
            height: side.height,
        };
        let class = cfg.classes.name(a.category_id).map_err(|e| CliError::failed("class", e))?;
        let job = build_inpaint_job(&scene, &mask, a.category_id, class, &cfg.prompts, &cfg.inpaint, seed + i as u64)
            .map_err(|e| CliError::failed(format!("annotation {i}"), e))?;
        jobs.push(DiffusionJob::Inpaint(job));
    }
    Ok(jobs)
}

pub async fn inpaint(mut cfg: Config, args: InpaintArgs, out: Output) -> Result<(), CliError> {
    args.backend.apply(&mut cfg);
    revalidate(&cfg)?;
    let jobs: Vec<DiffusionJob> = match (&args.batch, &args.coco, &args.scene_dir, &args.mask_dir) {
        (Some(b), ..) => read_json(b)?,
        (None, Some(c), Some(s), Some(m)) => jobs_from_coco(&cfg, c, s, m, args.seed.unwrap_or(cfg.seed))?,
        _ => return Err(CliError::Usage("inpaint needs --batch, or --coco with --scene-dir and --mask-dir".into())),
    };
    let dir = args.out.unwrap_or_else(|| cfg.output_dir.join("inpainted"));
    run_jobs(&cfg, jobs, &dir, out).await
}
