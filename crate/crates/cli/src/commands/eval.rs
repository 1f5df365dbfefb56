use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use serde::Serialize;
use spillkit_core::classes::ClassId;
use spillkit_core::config::Config;
use spillkit_core::dataset::{predictions_to_results, CocoAnnotation, CocoDataset, SplitManifest};
use spillkit_core::detector::{Detector, DetectorSpec};
use spillkit_core::eval::{
    render_report, render_sweep, run_eval, EvalOptions, EvalReport, EvalRun, ReportFormat, SweepTable,
};
use spillkit_core::metrics::{default_matching_rules, SweepCurve};
use spillkit_core::vlm::ParseOptions;
use spillkit_services::vlm_client::detector_sources;

use super::{read_coco, read_json, revalidate, write_json, Output};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// Ground-truth COCO file listing the images.
    #[arg(long)]
    coco: PathBuf,
    /// Detector source: vlm, replay, coco-results or oracle.
    #[arg(long)]
    detector: Option<String>,
    /// Replay log to answer from (implies --detector replay).
    #[arg(long, conflicts_with = "results")]
    replay: Option<PathBuf>,
    /// COCO results file to answer from (implies --detector coco-results).
    #[arg(long)]
    results: Option<PathBuf>,
    /// Split manifest; with --split-name restricts the images.
    #[arg(long, requires = "split_name")]
    split: Option<PathBuf>,
    #[arg(long)]
    split_name: Option<String>,
    /// Where image files live, for detectors that need pixels.
    #[arg(long)]
    image_dir: Option<PathBuf>,
    /// Class ids to query; defaults to the classes annotated in the split.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u32>>,
    /// Vision model endpoint override.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
}

struct Prepared {
    dataset: CocoDataset,
    split: Vec<u64>,
    detector: Arc<dyn Detector>,
    opts: EvalOptions,
}

fn prepare(cfg: &mut Config, args: &DetectorArgs) -> Result<Prepared, CliError> {
    if let Some(e) = &args.endpoint {
        cfg.vlm.endpoint = e.clone();
    }
    if let Some(p) = args.parallelism {
        cfg.eval.parallelism = p;
    }
    revalidate(cfg)?;
    let dataset = read_coco(&args.coco)?;
    let split = match (&args.split, &args.split_name) {
        (Some(path), Some(name)) => {
            let m: SplitManifest = read_json(path)?;
            m.splits
                .get(name)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("split '{name}' is not in {}", path.display())))?
        }
        _ => dataset.images.iter().map(|i| i.id).collect(),
    };
    let (name, path) = match (&args.replay, &args.results, &args.detector) {
        (Some(p), ..) => ("replay".to_string(), Some(p.clone())),
        (None, Some(p), _) => ("coco-results".to_string(), Some(p.clone())),
        (None, None, Some(d)) => (d.clone(), None),
        (None, None, None) => ("vlm".to_string(), None),
    };
    let source = detector_sources(&cfg.vlm, None)
        .get(&name)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = DetectorSpec {
        path,
        dataset: Some(Arc::new(dataset.clone())),
        parse: ParseOptions {
            ceiling: cfg.vlm.coordinate_ceiling,
            class_hint: None,
        },
    };
    let detector = source.build(&spec).map_err(|e| CliError::failed("detector", e))?;
    let opts = EvalOptions {
        tau: cfg.eval.tau,
        parallelism: cfg.eval.parallelism,
        matching_rule: cfg.eval.matching_rule.clone(),
        thresholds: cfg.eval.thresholds.clone(),
        query_classes: args.classes.as_ref().map(|v| v.iter().map(|c| ClassId(*c)).collect()),
        image_dir: args.image_dir.clone(),
        ..Default::default()
    };
    Ok(Prepared {
        dataset,
        split,
        detector,
        opts,
    })
}

async fn execute(cfg: &Config, p: &Prepared) -> Result<(EvalRun, EvalReport), CliError> {
    run_eval(
        &p.dataset,
        &p.split,
        p.detector.as_ref(),
        &cfg.classes,
        &default_matching_rules(),
        &p.opts,
    )
    .await
    .map_err(|e| CliError::failed("evaluation", e))
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    source: DetectorArgs,
    /// Write the COCO results here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct DetectOutput {
    results: Vec<CocoAnnotation>,
    failures: usize,
}

pub async fn detect(mut cfg: Config, args: DetectArgs, out: Output) -> Result<(), CliError> {
    let p = prepare(&mut cfg, &args.source)?;
    let (run, _) = execute(&cfg, &p).await?;
    let results = predictions_to_results(&run.predictions);
    if let Some(path) = &args.out {
        write_json(path, &results)?;
    }
    for f in &run.failures {
        tracing::warn!(image = f.image_id, class = f.class_id.0, error = %f.error, "detection failed");
    }
    let summary = DetectOutput {
        results,
        failures: run.failures.len(),
    };
    out.emit(&summary, || match &args.out {
        Some(path) => format!(
            "{} detections over {} images written to {} ({} failed calls)",
            summary.results.len(),
            run.image_ids.len(),
            path.display(),
            summary.failures
        ),
        None => serde_json::to_string_pretty(&summary.results).unwrap_or_default(),
    })
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    source: DetectorArgs,
    /// IoU threshold for a hit.
    #[arg(long)]
    tau: Option<f64>,
    /// Matching rule name, e.g. best-score or greedy.
    #[arg(long)]
    rule: Option<String>,
    /// Row label in rendered tables.
    #[arg(long, default_value = "Zero-Shot")]
    method: String,
    /// Column label in rendered tables.
    #[arg(long, default_value = "default")]
    model: String,
    #[arg(long, default_value = "eval")]
    dataset_name: String,
    /// Thresholds for the sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Save the report JSON here.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Save the raw run (predictions, failures) here.
    #[arg(long)]
    run_out: Option<PathBuf>,
}

async fn scored(mut cfg: Config, args: &EvalArgs) -> Result<EvalReport, CliError> {
    if let Some(t) = args.tau {
        cfg.eval.tau = t;
    }
    if let Some(r) = &args.rule {
        cfg.eval.matching_rule = r.clone();
    }
    if let Some(t) = &args.thresholds {
        cfg.eval.thresholds = t.clone();
    }
    let mut p = prepare(&mut cfg, &args.source)?;
    p.opts.method = args.method.clone();
    p.opts.model = args.model.clone();
    p.opts.dataset = args.dataset_name.clone();
    let (run, report) = execute(&cfg, &p).await?;
    if let Some(path) = &args.run_out {
        write_json(path, &run)?;
    }
    if let Some(path) = &args.report_out {
        write_json(path, &report)?;
    }
    Ok(report)
}

pub async fn evaluate(cfg: Config, args: EvalArgs, out: Output) -> Result<(), CliError> {
    let report = scored(cfg, &args).await?;
    out.emit(&report, || {
        let mut s = format!("hit-rate @ IoU {}: {:.2}\n", report.tau, report.hit_rate);
        for (class, rate) in &report.per_class {
            s.push_str(&format!("  {class}: {rate:.2}\n"));
        }
        s.push_str(&format!("pooled hit-rate: {:.2}\nmAP@50: {:.4}\n", report.pooled_hit_rate, report.map50));
        if !report.failed_images.is_empty() {
            s.push_str(&format!("failed images: {:?}\n", report.failed_images));
        }
        s
    })
}

pub async fn sweep(cfg: Config, args: EvalArgs, out: Output) -> Result<(), CliError> {
    let report = scored(cfg, &args).await?;
    let curve: SweepCurve = report
        .sweep
        .clone()
        .ok_or_else(|| CliError::Usage("the sweep needs at least one threshold".into()))?;
    out.emit(&curve, || {
        curve
            .thresholds()
            .iter()
            .zip(curve.hit_rates())
            .map(|(t, h)| format!("{t}\t{h:.4}\n"))
            .collect()
    })
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Report files written by `evaluate --report-out`; each holds one report or an array.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// markdown, csv or json.
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Render the per-threshold sweep table instead of the hit-rate table.
    #[arg(long)]
    sweep: bool,
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(Box<EvalReport>),
    Many(Vec<EvalReport>),
}

#[derive(Debug, Serialize)]
struct Rendered {
    format: ReportFormat,
    text: String,
}

pub fn render(args: RenderArgs, out: Output) -> Result<(), CliError> {
    let format: ReportFormat = args.format.parse().map_err(|e: spillkit_core::eval::ReportError| CliError::Usage(e.to_string()))?;
    let mut reports = Vec::new();
    for p in &args.reports {
        match read_json::<OneOrMany>(p)? {
            OneOrMany::One(r) => reports.push(*r),
            OneOrMany::Many(v) => reports.extend(v),
        }
    }
    let text = if args.sweep {
        let table = SweepTable::from_reports(&reports).map_err(|e| CliError::failed("sweep table", e))?;
        render_sweep(&table, format)
    } else {
        render_report(&reports, format)
    }
    .map_err(|e| CliError::failed("report", e))?;
    out.emit(&Rendered { format, text: text.clone() }, || text.clone())
}
