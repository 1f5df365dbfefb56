use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, ClassRegistry};
use crate::dataset::CocoDataset;
use crate::detector::{DetectError, DetectRequest, Detector};
use crate::geometry::Detection;
use crate::metrics::{map50, sweep_with, tally, uplift, MatchingRule, MetricError, SweepCurve};
use crate::registry::{Registry, UnknownStrategy};
use crate::vlm::{ImageInput, ParseStatus};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("detector has no answers for images {0:?}")]
    Coverage(Vec<u64>),
    #[error("image {0} is not in the dataset")]
    UnknownImage(u64),
    #[error("cannot compare: {0}")]
    Comparison(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Strategy(#[from] UnknownStrategy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub tau: f64,
    pub parallelism: usize,
    pub matching_rule: String,
    /// Thresholds for the localization sweep; empty disables it.
    pub thresholds: Vec<f64>,
    /// Row label, e.g. `Zero-Shot` or `LoRA (V+L)`.
    pub method: String,
    /// Column label, e.g. a model size.
    pub model: String,
    pub dataset: String,
    /// Classes to query per image; defaults to the classes annotated in the split.
    pub query_classes: Option<Vec<ClassId>>,
    /// Where image files live when the detector needs pixels.
    pub image_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: 0.5,
            parallelism: 4,
            matching_rule: "best-score".into(),
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            method: "Zero-Shot".into(),
            model: "default".into(),
            dataset: "eval".into(),
            query_classes: None,
            image_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub image_id: u64,
    pub class_id: ClassId,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub dataset: String,
    pub method: String,
    pub model: String,
    pub detector: String,
    pub image_ids: Vec<u64>,
    pub predictions: BTreeMap<u64, Vec<Detection>>,
    pub failures: Vec<FailureRecord>,
    pub parse_status: BTreeMap<String, usize>,
    pub options: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub model: String,
    pub tau: f64,
    pub matching_rule: String,
    /// Mean over classes of the per-class hit-rate.
    pub hit_rate: f64,
    /// Hits over all (image, class) units, ignoring class.
    pub pooled_hit_rate: f64,
    pub per_class: BTreeMap<String, f64>,
    pub map50: f64,
    pub map_skipped_classes: Vec<String>,
    pub sweep: Option<SweepCurve>,
    pub baseline: Option<String>,
    pub uplift: Option<f64>,
    /// Images with at least one failed detection call; counted as misses.
    pub failed_images: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uplift {
    pub method: String,
    pub baseline: String,
    pub overall: f64,
    /// Classes with a zero baseline rate are omitted.
    pub per_class: BTreeMap<String, f64>,
}

fn class_label(classes: &ClassRegistry, id: ClassId) -> String {
    classes
        .name(id)
        .map_or_else(|_| format!("class-{}", id.0), str::to_string)
}

fn status_key(s: ParseStatus) -> &'static str {
    match s {
        ParseStatus::Clean => "clean",
        ParseStatus::Repaired => "repaired",
        ParseStatus::Empty => "empty",
        ParseStatus::Unparseable => "unparseable",
    }
}

/// Queries the detector for every (image, class) pair of the split, then
/// scores the predictions. Failed calls are recorded and count as misses;
/// they never affect other images.
pub async fn run_eval(
    dataset: &CocoDataset,
    split: &[u64],
    detector: &dyn Detector,
    classes: &ClassRegistry,
    rules: &Registry<dyn MatchingRule>,
    opts: &EvalOptions,
) -> Result<(EvalRun, EvalReport), EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptyInput("evaluation split has no images"));
    }
    let rule = rules.get(&opts.matching_rule)?;
    let mut images = Vec::with_capacity(split.len());
    for id in split {
        images.push(dataset.image(*id).ok_or(EvalError::UnknownImage(*id))?);
    }
    let missing = detector.missing_images(split);
    if !missing.is_empty() {
        return Err(EvalError::Coverage(missing));
    }
    let query: Vec<ClassId> = match &opts.query_classes {
        Some(q) => q.clone(),
        None => {
            let wanted: BTreeSet<u64> = split.iter().copied().collect();
            dataset
                .annotations
                .iter()
                .filter(|a| wanted.contains(&a.image_id))
                .map(|a| a.category_id)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        }
    };

    let mut requests = Vec::new();
    let mut failures = Vec::new();
    for img in &images {
        let payload = if detector.needs_image() {
            let path = opts
                .image_dir
                .clone()
                .unwrap_or_default()
                .join(&img.file_name);
            match std::fs::read(&path) {
                Ok(b) => Some(ImageInput::Bytes(b)),
                Err(e) => {
                    let err = DetectError::Image(img.id, format!("{}: {e}", path.display()));
                    failures.extend(query.iter().map(|c| FailureRecord {
                        image_id: img.id,
                        class_id: *c,
                        error: err.to_string(),
                    }));
                    continue;
                }
            }
        } else {
            None
        };
        for c in &query {
            requests.push(DetectRequest {
                image_id: img.id,
                width: img.width,
                height: img.height,
                class_id: *c,
                class_name: class_label(classes, *c),
                image: payload.clone(),
            });
        }
    }

    let outcomes: Vec<_> = stream::iter(requests.iter())
        .map(|r| async move { (r, detector.detect(r).await) })
        .buffered(opts.parallelism.max(1))
        .collect()
        .await;

    let mut predictions: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    let mut parse_status: BTreeMap<String, usize> = BTreeMap::new();
    for (req, out) in outcomes {
        match out {
            Ok(p) => {
                *parse_status.entry(status_key(p.status).into()).or_default() += 1;
                predictions.entry(req.image_id).or_default().extend(
                    p.detections.into_iter().filter(|d| d.class_id == req.class_id),
                );
            }
            Err(e) => {
                tracing::warn!(image = req.image_id, class = req.class_id.0, error = %e, "detection failed");
                failures.push(FailureRecord {
                    image_id: req.image_id,
                    class_id: req.class_id,
                    error: e.to_string(),
                });
            }
        }
    }
    failures.sort_by_key(|f| (f.image_id, f.class_id));

    let evals = dataset.image_evals(split, &predictions);
    let t = tally(rule.as_ref(), &evals, opts.tau)?;
    let map = map50(&evals)?;
    let sweep = if opts.thresholds.is_empty() {
        None
    } else {
        Some(sweep_with(rule.as_ref(), &evals, &opts.thresholds, true)?)
    };
    let failed_images: Vec<u64> = failures
        .iter()
        .map(|f| f.image_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let report = EvalReport {
        dataset: opts.dataset.clone(),
        method: opts.method.clone(),
        model: opts.model.clone(),
        tau: opts.tau,
        matching_rule: rule.name().to_string(),
        hit_rate: t.class_mean_rate()?,
        pooled_hit_rate: t.pooled_rate()?,
        per_class: t
            .per_class
            .iter()
            .map(|(c, ct)| (class_label(classes, *c), ct.rate()))
            .collect(),
        map50: map.map,
        map_skipped_classes: map
            .skipped_classes
            .iter()
            .map(|c| class_label(classes, *c))
            .collect(),
        sweep,
        baseline: None,
        uplift: None,
        failed_images,
    };
    let run = EvalRun {
        dataset: opts.dataset.clone(),
        method: opts.method.clone(),
        model: opts.model.clone(),
        detector: detector.name().to_string(),
        image_ids: split.to_vec(),
        predictions,
        failures,
        parse_status,
        options: opts.clone(),
    };
    Ok((run, report))
}

/// Relative improvement of `report` over `baseline`, overall and per class.
pub fn compare(report: &EvalReport, baseline: &EvalReport) -> Result<Uplift, EvalError> {
    if report.dataset != baseline.dataset {
        return Err(EvalError::Comparison(format!(
            "dataset '{}' vs baseline '{}'",
            report.dataset, baseline.dataset
        )));
    }
    if report.tau != baseline.tau {
        return Err(EvalError::Comparison(format!(
            "tau {} vs baseline tau {}",
            report.tau, baseline.tau
        )));
    }
    let per_class = report
        .per_class
        .iter()
        .filter_map(|(c, r)| {
            let b = *baseline.per_class.get(c)?;
            uplift(*r, b).ok().map(|u| (c.clone(), u))
        })
        .collect();
    Ok(Uplift {
        method: report.method.clone(),
        baseline: baseline.method.clone(),
        overall: uplift(report.hit_rate, baseline.hit_rate)?,
        per_class,
    })
}

impl EvalReport {
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Result<Self, EvalError> {
        let u = compare(&self, baseline)?;
        self.baseline = Some(u.baseline);
        self.uplift = Some(u.overall);
        Ok(self)
    }
}
