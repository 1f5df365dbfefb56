use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use spillkit_core::classes::ClassId;
use spillkit_core::detector::{DetectError, DetectRequest, Detector};
use spillkit_core::geometry::Detection;
use spillkit_core::monitor::{
    decide_alerts, AlertRecord, FrameEvent, FrameLogEntry, FrameSequencer, SeverityRules,
    ThresholdPolicy,
};
use spillkit_core::vlm::ImageInput;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use super::sinks::{dispatch_alert, AlertSink, JsonlWriter};

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub entry: FrameLogEntry,
    pub alerts: Vec<AlertRecord>,
}

/// Runs the detector over one frame for each queried class and applies the
/// alert policy.
pub struct FrameEvaluator {
    pub detector: Arc<dyn Detector>,
    pub classes: Vec<(ClassId, String)>,
    pub policy: ThresholdPolicy,
    pub rules: SeverityRules,
    /// Extra attempts per class call after a transport failure.
    pub retries: u32,
    pub backoff: Duration,
}

impl FrameEvaluator {
    async fn detect_class(&self, req: &DetectRequest) -> (Result<Vec<Detection>, DetectError>, u32) {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.detector.detect(req).await {
                Ok(p) => {
                    let dets = p.detections.into_iter().filter(|d| d.class_id == req.class_id).collect();
                    return (Ok(dets), attempts);
                }
                Err(e @ DetectError::Transport(_)) if attempts <= self.retries => {
                    tracing::debug!(frame = req.image_id, error = %e, "retrying frame");
                    tokio::time::sleep(self.backoff * 2u32.saturating_pow(attempts - 1)).await;
                }
                Err(e) => return (Err(e), attempts),
            }
        }
    }

    /// Every frame yields a log entry. A failed detection call fails the
    /// whole frame and suppresses its alerts.
    pub async fn evaluate_frame(&self, ev: &FrameEvent) -> FrameOutcome {
        let image = if self.detector.needs_image() {
            match tokio::fs::read(&ev.image_ref).await {
                Ok(b) => Some(ImageInput::Bytes(b)),
                Err(e) => {
                    return FrameOutcome {
                        entry: FrameLogEntry::failed(ev.clone(), format!("reading {}: {e}", ev.image_ref), 0),
                        alerts: Vec::new(),
                    }
                }
            }
        } else {
            None
        };
        let mut detections = Vec::new();
        let mut max_attempts = 0;
        for (class_id, class_name) in &self.classes {
            let req = DetectRequest {
                image_id: ev.frame_id,
                width: ev.width,
                height: ev.height,
                class_id: *class_id,
                class_name: class_name.clone(),
                image: image.clone(),
            };
            let (res, attempts) = self.detect_class(&req).await;
            max_attempts = max_attempts.max(attempts);
            match res {
                Ok(d) => detections.extend(d),
                Err(e) => {
                    return FrameOutcome {
                        entry: FrameLogEntry::failed(ev.clone(), e.to_string(), max_attempts),
                        alerts: Vec::new(),
                    }
                }
            }
        }
        let alerts = decide_alerts(ev, &detections, &self.policy, &self.rules);
        FrameOutcome {
            entry: FrameLogEntry::ok(ev.clone(), detections, &alerts, max_attempts),
            alerts,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorStats {
    pub frames: u64,
    pub failed_frames: u64,
    pub alerts: u64,
    pub deliveries: u64,
    pub dead_letters: u64,
}

/// Detection and dispatch stages joined by bounded queues.
pub struct Monitor {
    pub evaluator: Arc<FrameEvaluator>,
    pub sinks: Vec<Arc<dyn AlertSink>>,
    pub detection_log: Arc<JsonlWriter>,
    pub dead_letter: Arc<JsonlWriter>,
    pub parallelism: usize,
    pub queue_capacity: usize,
}

impl Monitor {
    /// Returns the frame queue and a handle resolving to the run's totals
    /// once every sender is dropped and the queues drain. Frames come out in
    /// arrival order, so per-source ordering is preserved.
    pub fn spawn(self) -> (mpsc::Sender<FrameEvent>, JoinHandle<MonitorStats>) {
        let cap = self.queue_capacity.max(1);
        let (frame_tx, frame_rx) = mpsc::channel::<FrameEvent>(cap);
        let (alert_tx, mut alert_rx) = mpsc::channel::<AlertRecord>(cap);
        let evaluator = self.evaluator.clone();
        let log = self.detection_log.clone();
        let par = self.parallelism.max(1);

        let detect = tokio::spawn(async move {
            let mut seq = FrameSequencer::default();
            let frames = stream::unfold(frame_rx, |mut rx| async move { rx.recv().await.map(|f| (f, rx)) })
                .map(move |mut f| {
                    seq.observe(&mut f);
                    f
                });
            let mut outcomes = std::pin::pin!(frames
                .map(|f| {
                    let ev = evaluator.clone();
                    async move { ev.evaluate_frame(&f).await }
                })
                .buffered(par));
            let mut stats = MonitorStats::default();
            while let Some(o) = outcomes.next().await {
                stats.frames += 1;
                if o.entry.error.is_some() {
                    stats.failed_frames += 1;
                }
                if let Err(e) = log.append(&o.entry) {
                    tracing::error!(error = %e, "detection log write failed");
                }
                for a in o.alerts {
                    stats.alerts += 1;
                    if alert_tx.send(a).await.is_err() {
                        break;
                    }
                }
            }
            stats
        });

        let sinks = self.sinks.clone();
        let dead = self.dead_letter.clone();
        let dispatch = tokio::spawn(async move {
            let (mut ok, mut dl) = (0, 0);
            while let Some(a) = alert_rx.recv().await {
                for d in dispatch_alert(&a, &sinks, &dead).await {
                    if d.delivered {
                        ok += 1;
                    } else {
                        dl += 1;
                    }
                }
            }
            (ok, dl)
        });

        let handle = tokio::spawn(async move {
            let mut stats = detect.await.unwrap_or_default();
            let (ok, dl) = dispatch.await.unwrap_or_default();
            stats.deliveries = ok;
            stats.dead_letters = dl;
            stats
        });
        (frame_tx, handle)
    }
}
