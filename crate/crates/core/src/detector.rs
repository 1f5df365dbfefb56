//! Detection sources. A live model, a replay log, an external detector's
//! COCO results and the ground truth itself all answer the same request.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;

use crate::classes::ClassId;
use crate::dataset::{parse_coco_results, CocoAnnotation, CocoDataset};
use crate::geometry::{Detection, GroundTruth};
use crate::registry::Registry;
use crate::vlm::{
    parse_response_with, read_replay_log, serialize_detections, ImageInput, ParseOptions,
    ParseStatus, ParsedDetections, ReplayLog,
};

#[derive(Debug, Clone)]
pub struct DetectRequest {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub class_id: ClassId,
    pub class_name: String,
    pub image: Option<ImageInput>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("no recorded answer for image {image_id}, class {}", class_id.0)]
    NotCovered { image_id: u64, class_id: ClassId },
    #[error("backend: {0}")]
    Backend(String),
    #[error("image {0} unavailable: {1}")]
    Image(u64, String),
    #[error("detector setup: {0}")]
    Setup(String),
}

#[async_trait]
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// Whether requests must carry image content.
    fn needs_image(&self) -> bool {
        false
    }

    /// Image ids this source cannot answer for at all.
    fn missing_images(&self, _image_ids: &[u64]) -> Vec<u64> {
        Vec::new()
    }

    async fn detect(&self, req: &DetectRequest) -> Result<ParsedDetections, DetectError>;
}

fn hinted(opts: &ParseOptions, class: ClassId) -> ParseOptions {
    ParseOptions {
        class_hint: Some(class),
        ..*opts
    }
}

fn direct(dets: Vec<Detection>) -> ParsedDetections {
    ParsedDetections {
        raw_text: serialize_detections(&dets),
        status: if dets.is_empty() {
            ParseStatus::Empty
        } else {
            ParseStatus::Clean
        },
        detections: dets,
        dropped: 0,
        missing_scores: 0,
    }
}

/// Re-parses recorded model replies; recorded failures replay as failures.
#[derive(Debug, Clone)]
pub struct ReplayDetector {
    log: ReplayLog,
    opts: ParseOptions,
}

impl ReplayDetector {
    pub fn new(log: ReplayLog, opts: ParseOptions) -> Self {
        Self { log, opts }
    }
}

#[async_trait]
impl Detector for ReplayDetector {
    fn name(&self) -> &str {
        "replay"
    }

    fn missing_images(&self, image_ids: &[u64]) -> Vec<u64> {
        let have: std::collections::BTreeSet<u64> = self.log.image_ids().collect();
        image_ids.iter().copied().filter(|i| !have.contains(i)).collect()
    }

    async fn detect(&self, req: &DetectRequest) -> Result<ParsedDetections, DetectError> {
        let e = self
            .log
            .get(req.image_id, req.class_id)
            .ok_or(DetectError::NotCovered {
                image_id: req.image_id,
                class_id: req.class_id,
            })?;
        match (&e.response_text, &e.error) {
            (Some(text), _) => Ok(parse_response_with(
                text,
                req.width,
                req.height,
                &hinted(&self.opts, req.class_id),
            )),
            (None, Some(err)) => Err(DetectError::Transport(err.clone())),
            (None, None) => Err(DetectError::Backend("recorded entry has no reply".into())),
        }
    }
}

/// Predictions imported from a COCO results array (e.g. a conventional
/// detector's output). An image with no rows simply has no detections.
#[derive(Debug, Clone, Default)]
pub struct CocoResultsDetector {
    by_image: BTreeMap<u64, Vec<Detection>>,
}

impl CocoResultsDetector {
    pub fn new(results: &[CocoAnnotation]) -> Result<Self, DetectError> {
        let mut by_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        for r in results {
            let bbox = r
                .to_bbox()
                .map_err(|e| DetectError::Setup(format!("image {}: {e}", r.image_id)))?;
            let score = r.score.unwrap_or(1.0);
            let d = Detection::new(bbox, r.category_id, score)
                .map_err(|e| DetectError::Setup(format!("image {}: {e}", r.image_id)))?;
            by_image.entry(r.image_id).or_default().push(d);
        }
        Ok(Self { by_image })
    }
}

#[async_trait]
impl Detector for CocoResultsDetector {
    fn name(&self) -> &str {
        "coco-results"
    }

    async fn detect(&self, req: &DetectRequest) -> Result<ParsedDetections, DetectError> {
        let dets: Vec<Detection> = self
            .by_image
            .get(&req.image_id)
            .map(|v| v.iter().filter(|d| d.class_id == req.class_id).cloned().collect())
            .unwrap_or_default();
        Ok(direct(dets))
    }
}

/// Answers with the ground truth at score 1.0. Useful as an upper bound and
/// for checking the metric path end to end.
#[derive(Debug, Clone, Default)]
pub struct OracleDetector {
    gts: BTreeMap<u64, Vec<GroundTruth>>,
}

impl OracleDetector {
    pub fn new(dataset: &CocoDataset) -> Self {
        let gts = dataset
            .images
            .iter()
            .map(|img| (img.id, dataset.ground_truths(img.id)))
            .collect();
        Self { gts }
    }
}

#[async_trait]
impl Detector for OracleDetector {
    fn name(&self) -> &str {
        "oracle"
    }

    async fn detect(&self, req: &DetectRequest) -> Result<ParsedDetections, DetectError> {
        let dets: Vec<Detection> = self
            .gts
            .get(&req.image_id)
            .into_iter()
            .flatten()
            .filter(|g| g.class_id == req.class_id)
            .map(|g| Detection {
                bbox: g.bbox,
                class_id: g.class_id,
                score: 1.0,
            })
            .collect();
        Ok(direct(dets))
    }
}

/// Everything a detector source might need to construct itself.
#[derive(Debug, Clone, Default)]
pub struct DetectorSpec {
    pub path: Option<PathBuf>,
    pub dataset: Option<Arc<CocoDataset>>,
    pub parse: ParseOptions,
}

pub trait DetectorSource: Send + Sync {
    fn build(&self, spec: &DetectorSpec) -> Result<Arc<dyn Detector>, DetectError>;
}

fn need_path(spec: &DetectorSpec, what: &str) -> Result<PathBuf, DetectError> {
    spec.path
        .clone()
        .ok_or_else(|| DetectError::Setup(format!("{what} source needs a file path")))
}

struct ReplaySource;
impl DetectorSource for ReplaySource {
    fn build(&self, spec: &DetectorSpec) -> Result<Arc<dyn Detector>, DetectError> {
        let p = need_path(spec, "replay")?;
        let log = read_replay_log(&p).map_err(|e| DetectError::Setup(e.to_string()))?;
        Ok(Arc::new(ReplayDetector::new(log, spec.parse)))
    }
}

struct CocoResultsSource;
impl DetectorSource for CocoResultsSource {
    fn build(&self, spec: &DetectorSpec) -> Result<Arc<dyn Detector>, DetectError> {
        let p = need_path(spec, "coco-results")?;
        let bytes = std::fs::read(&p).map_err(|e| DetectError::Setup(format!("{}: {e}", p.display())))?;
        let rows = parse_coco_results(&bytes).map_err(|e| DetectError::Setup(e.to_string()))?;
        Ok(Arc::new(CocoResultsDetector::new(&rows)?))
    }
}

struct OracleSource;
impl DetectorSource for OracleSource {
    fn build(&self, spec: &DetectorSpec) -> Result<Arc<dyn Detector>, DetectError> {
        let ds = spec
            .dataset
            .as_ref()
            .ok_or_else(|| DetectError::Setup("oracle source needs the dataset".into()))?;
        Ok(Arc::new(OracleDetector::new(ds)))
    }
}

/// Offline sources. Network-backed sources are registered by the services crate.
pub fn default_detector_sources() -> Registry<dyn DetectorSource> {
    let mut reg: Registry<dyn DetectorSource> = Registry::new("detector source");
    reg.register("replay", Arc::new(ReplaySource));
    reg.register("coco-results", Arc::new(CocoResultsSource));
    reg.register("oracle", Arc::new(OracleSource));
    reg
}
