//! Hit-rate, threshold sweeps, mAP@50 and relative uplift.

mod ap;
mod hit_rate;

pub use ap::{average_precision, map50, ClassAp, MapResult, MAP_IOU};
pub use hit_rate::{
    default_matching_rules, mean_hit_rate, sweep, sweep_with, tally, BestScorePerClass, ClassTally,
    GreedyAll, HitTally, ImageEval, MatchingRule, SweepCurve,
};

use crate::geometry::GeometryError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("thresholds must be strictly increasing within (0, 1], got {0:?}")]
    UnsortedThresholds(Vec<f64>),
    #[error("uplift undefined: zero-shot hit-rate is 0 (division by zero)")]
    ZeroBaseline,
    #[error("hit-rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
}

/// Relative improvement of `hr_method` over `hr_zeroshot`, in percent.
/// Computed as a ratio minus one, which keeps two-decimal inputs such as
/// (0.63, 0.35) exact where the difference form picks up an ulp.
pub fn uplift(hr_method: f64, hr_zeroshot: f64) -> Result<f64, MetricError> {
    for v in [hr_method, hr_zeroshot] {
        if !v.is_finite() || v < 0.0 {
            return Err(MetricError::RateOutOfRange(v));
        }
    }
    if hr_zeroshot == 0.0 {
        return Err(MetricError::ZeroBaseline);
    }
    Ok((hr_method / hr_zeroshot - 1.0) * 100.0)
}
