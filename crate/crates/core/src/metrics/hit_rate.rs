use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::classes::ClassId;
use crate::geometry::{check_threshold, iou, Detection, GroundTruth};
use crate::registry::Registry;

/// Predictions and ground truths for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: u64,
    pub predictions: Vec<Detection>,
    pub ground_truths: Vec<GroundTruth>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTally {
    pub hits: u64,
    pub total: u64,
}

impl ClassTally {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Hit counts accumulated per class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HitTally {
    pub per_class: BTreeMap<ClassId, ClassTally>,
}

impl HitTally {
    pub fn record(&mut self, class: ClassId, hit: bool) {
        let t = self.per_class.entry(class).or_default();
        t.total += 1;
        if hit {
            t.hits += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.per_class.values().map(|t| t.total).sum()
    }

    pub fn hits(&self) -> u64 {
        self.per_class.values().map(|t| t.hits).sum()
    }

    /// Hits over all counted units, pooled across classes.
    pub fn pooled_rate(&self) -> Result<f64, MetricError> {
        match self.total() {
            0 => Err(MetricError::EmptyInput("no ground-truth boxes in evaluation set")),
            n => Ok(self.hits() as f64 / n as f64),
        }
    }

    /// Unweighted mean of per-class rates.
    pub fn class_mean_rate(&self) -> Result<f64, MetricError> {
        let rates: Vec<f64> = self
            .per_class
            .values()
            .filter(|t| t.total > 0)
            .map(ClassTally::rate)
            .collect();
        if rates.is_empty() {
            return Err(MetricError::EmptyInput("no ground-truth boxes in evaluation set"));
        }
        Ok(rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

/// How predictions in one image are paired with ground truths.
pub trait MatchingRule: Send + Sync {
    fn name(&self) -> &'static str;
    fn tally_image(&self, image: &ImageEval, tau: f64, tally: &mut HitTally);
}

/// One query per class: the highest-score prediction of each class is tested
/// against every ground truth of that class. Counting unit is the
/// (image, class) pair.
#[derive(Debug, Default, Clone, Copy)]
pub struct BestScorePerClass;

impl MatchingRule for BestScorePerClass {
    fn name(&self) -> &'static str {
        "best-score"
    }

    fn tally_image(&self, image: &ImageEval, tau: f64, tally: &mut HitTally) {
        let classes: BTreeSet<ClassId> = image.ground_truths.iter().map(|g| g.class_id).collect();
        for class in classes {
            let best = image
                .predictions
                .iter()
                .filter(|p| p.class_id == class)
                .fold(None::<&Detection>, |acc, p| match acc {
                    Some(a) if a.score >= p.score => Some(a),
                    _ => Some(p),
                });
            let hit = best.is_some_and(|p| {
                image
                    .ground_truths
                    .iter()
                    .filter(|g| g.class_id == class)
                    .any(|g| iou(&p.bbox, &g.bbox) >= tau)
            });
            tally.record(class, hit);
        }
    }
}

/// Every prediction, in descending score order, claims the unmatched ground
/// truth of its class with the highest IoU at or above `tau`. Counting unit is
/// the ground-truth box.
#[derive(Debug, Default, Clone, Copy)]
pub struct GreedyAll;

impl MatchingRule for GreedyAll {
    fn name(&self) -> &'static str {
        "greedy-all"
    }

    fn tally_image(&self, image: &ImageEval, tau: f64, tally: &mut HitTally) {
        let matched = greedy_match(&image.predictions, &image.ground_truths, tau);
        for (g, m) in image.ground_truths.iter().zip(matched) {
            tally.record(g.class_id, m);
        }
    }
}

/// Returns, per ground truth, whether some prediction claimed it.
pub(crate) fn greedy_match(preds: &[Detection], gts: &[GroundTruth], tau: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= tau && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
    }
    taken
}

pub fn default_matching_rules() -> Registry<dyn MatchingRule> {
    let mut reg: Registry<dyn MatchingRule> = Registry::new("matching rule");
    reg.register("best-score", Arc::new(BestScorePerClass));
    reg.register("greedy-all", Arc::new(GreedyAll));
    reg
}

pub fn tally(
    rule: &dyn MatchingRule,
    images: &[ImageEval],
    tau: f64,
) -> Result<HitTally, MetricError> {
    let tau = check_threshold(tau)?;
    let mut t = HitTally::default();
    for img in images {
        rule.tally_image(img, tau, &mut t);
    }
    if t.total() == 0 {
        return Err(MetricError::EmptyInput("no ground-truth boxes in evaluation set"));
    }
    Ok(t)
}

/// Pooled hit-rate under the default best-score-per-class rule.
pub fn mean_hit_rate(images: &[ImageEval], tau: f64) -> Result<f64, MetricError> {
    tally(&BestScorePerClass, images, tau)?.pooled_rate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    thresholds: Vec<f64>,
    hit_rates: Vec<f64>,
}

impl SweepCurve {
    pub fn new(thresholds: Vec<f64>, hit_rates: Vec<f64>) -> Result<Self, MetricError> {
        validate_thresholds(&thresholds)?;
        if thresholds.len() != hit_rates.len() {
            return Err(MetricError::EmptyInput("sweep thresholds and rates differ in length"));
        }
        if let Some(r) = hit_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(MetricError::RateOutOfRange(*r));
        }
        Ok(Self {
            thresholds,
            hit_rates,
        })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn hit_rates(&self) -> &[f64] {
        &self.hit_rates
    }

    pub fn is_monotone(&self) -> bool {
        self.hit_rates.windows(2).all(|w| w[1] <= w[0])
    }
}

fn validate_thresholds(thresholds: &[f64]) -> Result<(), MetricError> {
    let ok = !thresholds.is_empty()
        && thresholds.iter().all(|t| check_threshold(*t).is_ok())
        && thresholds.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(MetricError::UnsortedThresholds(thresholds.to_vec()))
    }
}

pub fn sweep(images: &[ImageEval], thresholds: &[f64]) -> Result<SweepCurve, MetricError> {
    sweep_with(&BestScorePerClass, images, thresholds, false)
}

/// Sweep under an arbitrary rule; `class_mean` selects the class-averaged rate
/// instead of the pooled one.
pub fn sweep_with(
    rule: &dyn MatchingRule,
    images: &[ImageEval],
    thresholds: &[f64],
    class_mean: bool,
) -> Result<SweepCurve, MetricError> {
    validate_thresholds(thresholds)?;
    let rates = thresholds
        .iter()
        .map(|&t| {
            let tl = tally(rule, images, t)?;
            if class_mean {
                tl.class_mean_rate()
            } else {
                tl.pooled_rate()
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    SweepCurve::new(thresholds.to_vec(), rates)
}
