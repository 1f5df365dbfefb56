//! Alert decisions for the frame-monitoring loop: which detections raise an
//! alert, how severe it is, and the per-frame log that makes those decisions
//! replayable.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::classes::ClassId;
use crate::geometry::{BBox, Detection};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("{field} = {value} must lie in [0, 1]")]
    Threshold { field: String, value: f64 },
    #[error("severity.{0} must be finite and ordered (medium <= high)")]
    Severity(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEvent {
    /// Ingest sequence number; also the image id used for detector requests.
    #[serde(default)]
    pub frame_id: u64,
    pub source_id: String,
    pub timestamp: DateTime<Utc>,
    pub image_ref: String,
    pub content_hash: String,
    pub width: u32,
    pub height: u32,
    /// Set when the frame is older than the last one seen from its source.
    #[serde(default)]
    pub late: bool,
}

/// Tracks the newest timestamp per source and flags frames that arrive out of order.
#[derive(Debug, Default)]
pub struct FrameSequencer {
    last: HashMap<String, DateTime<Utc>>,
}

impl FrameSequencer {
    pub fn observe(&mut self, ev: &mut FrameEvent) {
        match self.last.get(&ev.source_id) {
            Some(prev) if ev.timestamp < *prev => ev.late = true,
            _ => {
                self.last.insert(ev.source_id.clone(), ev.timestamp);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub default_threshold: f64,
    pub per_class: BTreeMap<ClassId, f64>,
    pub min_area_px: Option<f64>,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            default_threshold: 0.5,
            per_class: BTreeMap::new(),
            min_area_px: None,
        }
    }
}

impl ThresholdPolicy {
    pub fn threshold(&self, class: ClassId) -> f64 {
        self.per_class.get(&class).copied().unwrap_or(self.default_threshold)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let check = |field: String, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(PolicyError::Threshold { field, value: v })
            }
        };
        check("monitor.policy.default_threshold".into(), self.default_threshold)?;
        for (c, v) in &self.per_class {
            check(format!("monitor.policy.per_class.{}", c.0), *v)?;
        }
        Ok(())
    }

    pub fn admits(&self, d: &Detection) -> bool {
        d.score >= self.threshold(d.class_id)
            && self.min_area_px.is_none_or(|min| d.bbox.area() >= min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Low,
    Medium,
    High,
}

/// Low below `medium_score`; medium below `high_score` or when the box covers
/// less than `small_area_fraction` of the frame; high otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeverityRules {
    pub medium_score: f64,
    pub high_score: f64,
    pub small_area_fraction: f64,
}

impl Default for SeverityRules {
    fn default() -> Self {
        Self {
            medium_score: 0.7,
            high_score: 0.9,
            small_area_fraction: 0.01,
        }
    }
}

impl SeverityRules {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.medium_score.is_finite() && self.high_score.is_finite())
            || self.medium_score > self.high_score
        {
            return Err(PolicyError::Severity("medium_score"));
        }
        if !(self.small_area_fraction.is_finite() && self.small_area_fraction >= 0.0) {
            return Err(PolicyError::Severity("small_area_fraction"));
        }
        Ok(())
    }

    pub fn classify(&self, score: f64, bbox: &BBox, frame_w: u32, frame_h: u32) -> Severity {
        let frame_area = frame_w as f64 * frame_h as f64;
        let small = frame_area > 0.0 && bbox.area() / frame_area < self.small_area_fraction;
        if score < self.medium_score {
            Severity::Low
        } else if score < self.high_score || small {
            Severity::Medium
        } else {
            Severity::High
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub alert_id: String,
    pub source_id: String,
    pub timestamp: DateTime<Utc>,
    pub image_ref: String,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
    pub severity: Severity,
}

fn alert_id(ev: &FrameEvent, d: &Detection, idx: usize) -> String {
    let key = format!(
        "{}|{}|{}|{}|{:?}|{}",
        ev.source_id,
        ev.timestamp.to_rfc3339(),
        ev.content_hash,
        d.class_id.0,
        d.bbox.to_xywh(),
        idx
    );
    sha256_hex(key.as_bytes())[..16].to_string()
}

/// Alerts for exactly the detections the policy admits, in input order.
pub fn decide_alerts(
    ev: &FrameEvent,
    detections: &[Detection],
    policy: &ThresholdPolicy,
    rules: &SeverityRules,
) -> Vec<AlertRecord> {
    detections
        .iter()
        .enumerate()
        .filter(|(_, d)| policy.admits(d))
        .map(|(i, d)| AlertRecord {
            alert_id: alert_id(ev, d, i),
            source_id: ev.source_id.clone(),
            timestamp: ev.timestamp,
            image_ref: ev.image_ref.clone(),
            class_id: d.class_id,
            bbox: d.bbox,
            score: d.score,
            severity: rules.classify(d.score, &d.bbox, ev.width, ev.height),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStatus {
    Ok,
    Failed,
}

/// One line of the detection log, written for every processed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLogEntry {
    pub event: FrameEvent,
    pub status: FrameStatus,
    pub detections: Vec<Detection>,
    pub alert_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub attempts: u32,
}

impl FrameLogEntry {
    pub fn ok(event: FrameEvent, detections: Vec<Detection>, alerts: &[AlertRecord], attempts: u32) -> Self {
        Self {
            event,
            status: FrameStatus::Ok,
            detections,
            alert_ids: alerts.iter().map(|a| a.alert_id.clone()).collect(),
            error: None,
            attempts,
        }
    }

    pub fn failed(event: FrameEvent, error: String, attempts: u32) -> Self {
        Self {
            event,
            status: FrameStatus::Failed,
            detections: Vec::new(),
            alert_ids: Vec::new(),
            error: Some(error),
            attempts,
        }
    }
}

/// Recomputes alert decisions from a detection log. Failed frames never alert.
pub fn replay_alerts(
    log: &[FrameLogEntry],
    policy: &ThresholdPolicy,
    rules: &SeverityRules,
) -> Vec<AlertRecord> {
    log.iter()
        .filter(|e| e.status == FrameStatus::Ok)
        .flat_map(|e| decide_alerts(&e.event, &e.detections, policy, rules))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> FrameEvent {
        FrameEvent {
            frame_id: 1,
            source_id: "cam-1".into(),
            timestamp: "2025-01-01T00:00:00Z".parse().unwrap(),
            image_ref: "frames/a.png".into(),
            content_hash: "ab".into(),
            width: 1024,
            height: 1024,
            late: false,
        }
    }

    fn det(score: f64, w: f64) -> Detection {
        Detection::new(BBox::from_xywh(256.0, 411.0, w, 95.0).unwrap(), ClassId(3), score).unwrap()
    }

    #[test]
    fn threshold_rule() {
        let p = ThresholdPolicy::default();
        let r = SeverityRules::default();
        let a = decide_alerts(&frame(), &[det(0.97, 142.0)], &p, &r);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].severity, Severity::High);
        assert!(decide_alerts(&frame(), &[det(0.30, 142.0)], &p, &r).is_empty());
        assert_eq!(decide_alerts(&frame(), &[det(0.5, 142.0)], &p, &r).len(), 1);
    }

    #[test]
    fn severity_tiers() {
        let r = SeverityRules::default();
        let big = BBox::from_xywh(0.0, 0.0, 200.0, 200.0).unwrap();
        let tiny = BBox::from_xywh(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(r.classify(0.6, &big, 1024, 1024), Severity::Low);
        assert_eq!(r.classify(0.8, &big, 1024, 1024), Severity::Medium);
        assert_eq!(r.classify(0.95, &tiny, 1024, 1024), Severity::Medium);
        assert_eq!(r.classify(0.95, &big, 1024, 1024), Severity::High);
    }

    #[test]
    fn ids_deterministic_and_replayable() {
        let p = ThresholdPolicy::default();
        let r = SeverityRules::default();
        let dets = vec![det(0.97, 142.0), det(0.2, 50.0), det(0.75, 60.0)];
        let a = decide_alerts(&frame(), &dets, &p, &r);
        assert_eq!(a, decide_alerts(&frame(), &dets, &p, &r));
        let log = vec![
            FrameLogEntry::ok(frame(), dets.clone(), &a, 1),
            FrameLogEntry::failed(frame(), "down".into(), 3),
        ];
        assert_eq!(replay_alerts(&log, &p, &r), a);
    }

    #[test]
    fn late_frames_flagged() {
        let mut s = FrameSequencer::default();
        let mut a = frame();
        let mut b = frame();
        b.timestamp = "2024-12-31T23:59:59Z".parse().unwrap();
        s.observe(&mut a);
        s.observe(&mut b);
        assert!(!a.late && b.late);
    }
}
