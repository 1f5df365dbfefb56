//! Scene tasks for the human placement step: which boxes were drawn on a
//! generated scene, and where the scene sits in the review cycle.

use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::classes::{ClassId, ClassRegistry};
use crate::generation::ImageRef;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneStatus {
    Pending,
    Annotated,
    Inpainted,
    Accepted,
    Rejected,
}

impl SceneStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SceneStatus::Pending => "pending",
            SceneStatus::Annotated => "annotated",
            SceneStatus::Inpainted => "inpainted",
            SceneStatus::Accepted => "accepted",
            SceneStatus::Rejected => "rejected",
        }
    }
}

impl FromStr for SceneStatus {
    type Err = AnnotationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "pending" => SceneStatus::Pending,
            "annotated" => SceneStatus::Annotated,
            "inpainted" => SceneStatus::Inpainted,
            "accepted" => SceneStatus::Accepted,
            "rejected" => SceneStatus::Rejected,
            other => return Err(AnnotationError::UnknownStatus(other.to_string())),
        })
    }
}

/// Things that can happen to a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneVerb {
    Submit,
    InpaintDone,
    Accept,
    Reject,
    /// A rejected scene goes back for another inpainting round.
    Requeue,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown status '{0}'")]
    UnknownStatus(String),
    #[error("scene {scene}: cannot {verb:?} while {status:?}")]
    State {
        scene: String,
        status: SceneStatus,
        verb: SceneVerb,
    },
    #[error("scene {0} is parked after too many rejections")]
    Parked(String),
    #[error("placement {index}: bbox {bbox:?} does not fit a {width}x{height} image")]
    Geometry {
        index: usize,
        bbox: [f64; 4],
        width: u32,
        height: u32,
    },
    #[error("placement {index}: class {} is not registered", class_id.0)]
    UnknownClass { index: usize, class_id: ClassId },
    #[error("submission has no placements")]
    EmptySubmission,
    #[error("scene {scene} changed (version {current}, expected {expected})")]
    Stale {
        scene: String,
        current: u64,
        expected: u64,
    },
}

/// The only legal moves. Anything else is a state error.
pub fn next_status(status: SceneStatus, verb: SceneVerb) -> Option<SceneStatus> {
    use SceneStatus::*;
    use SceneVerb::*;
    match (status, verb) {
        (Pending | Rejected, Submit) => Some(Annotated),
        (Annotated, InpaintDone) => Some(Inpainted),
        (Inpainted, Accept) => Some(Accepted),
        (Inpainted, Reject) => Some(Rejected),
        (Rejected, Requeue) => Some(Annotated),
        _ => None,
    }
}

/// One box drawn by the annotator, in COCO `[x, y, w, h]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub bbox: [f64; 4],
    pub class_id: ClassId,
    /// Free text such as "near valve"; stored, not used for generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

pub fn validate_placements(
    placements: &[Placement],
    width: u32,
    height: u32,
    classes: &ClassRegistry,
) -> Result<Vec<BBox>, AnnotationError> {
    if placements.is_empty() {
        return Err(AnnotationError::EmptySubmission);
    }
    placements
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if !classes.contains(p.class_id) {
                return Err(AnnotationError::UnknownClass {
                    index,
                    class_id: p.class_id,
                });
            }
            let [x, y, w, h] = p.bbox;
            BBox::from_xywh(x, y, w, h)
                .ok()
                .filter(|b| b.area() > 0.0 && b.within(width as f64, height as f64))
                .ok_or(AnnotationError::Geometry {
                    index,
                    bbox: p.bbox,
                    width,
                    height,
                })
        })
        .collect()
}

/// A new seed for the `round`-th retry of a scene (splitmix64 step).
pub fn reseed(seed: u64, round: u32) -> u64 {
    let mut z = seed.wrapping_add((round as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTask {
    pub scene_id: String,
    pub image: ImageRef,
    /// COCO image id of the scene in the annotation file.
    pub image_id: u64,
    pub status: SceneStatus,
    pub placements: Vec<Placement>,
    pub annotation_ids: Vec<u64>,
    /// Job ids of the current inpainting round, in chaining order.
    pub jobs: Vec<String>,
    pub seed: u64,
    pub rejects: u32,
    pub parked: bool,
    pub preview: Option<String>,
    /// Further inpainted variants, when more than one is generated per box.
    #[serde(default)]
    pub alternates: Vec<String>,
    /// Last inpainting failure, cleared by the next success.
    #[serde(default)]
    pub last_error: Option<String>,
    /// Bumped on every change; clients echo it to detect stale views.
    pub version: u64,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl SceneTask {
    pub fn new(scene_id: impl Into<String>, image: ImageRef, image_id: u64, seed: u64) -> Self {
        let now = Utc::now();
        Self {
            scene_id: scene_id.into(),
            image,
            image_id,
            status: SceneStatus::Pending,
            placements: Vec::new(),
            annotation_ids: Vec::new(),
            jobs: Vec::new(),
            seed,
            rejects: 0,
            parked: false,
            preview: None,
            alternates: Vec::new(),
            last_error: None,
            version: 0,
            created_at: now,
            updated_at: now,
        }
    }

    pub fn check_version(&self, expected: Option<u64>) -> Result<(), AnnotationError> {
        match expected {
            Some(v) if v != self.version => Err(AnnotationError::Stale {
                scene: self.scene_id.clone(),
                current: self.version,
                expected: v,
            }),
            _ => Ok(()),
        }
    }

    /// Applies `verb` if it is legal from the current status.
    pub fn apply(&mut self, verb: SceneVerb) -> Result<SceneStatus, AnnotationError> {
        let to = next_status(self.status, verb).ok_or_else(|| AnnotationError::State {
            scene: self.scene_id.clone(),
            status: self.status,
            verb,
        })?;
        self.status = to;
        self.version += 1;
        self.updated_at = Utc::now();
        Ok(to)
    }

    /// Records a rejection and decides whether the scene goes back for
    /// another round (`true`) or is parked.
    pub fn reject(&mut self, max_rejects: u32) -> Result<bool, AnnotationError> {
        self.apply(SceneVerb::Reject)?;
        self.rejects += 1;
        self.preview = None;
        self.alternates.clear();
        if self.rejects >= max_rejects {
            self.parked = true;
            return Ok(false);
        }
        self.seed = reseed(self.seed, self.rejects);
        self.apply(SceneVerb::Requeue)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SceneTask {
        SceneTask::new(
            "s1",
            ImageRef {
                path: "scenes/s1.png".into(),
                width: 1024,
                height: 1024,
            },
            1,
            42,
        )
    }

    #[test]
    fn happy_path_and_double_accept() {
        let mut t = task();
        t.apply(SceneVerb::Submit).unwrap();
        t.apply(SceneVerb::InpaintDone).unwrap();
        t.apply(SceneVerb::Accept).unwrap();
        assert!(matches!(t.apply(SceneVerb::Accept), Err(AnnotationError::State { .. })));
        assert!(matches!(t.apply(SceneVerb::Submit), Err(AnnotationError::State { .. })));
    }

    #[test]
    fn reject_requeues_then_parks() {
        let mut t = task();
        t.apply(SceneVerb::Submit).unwrap();
        let mut seeds = vec![t.seed];
        for round in 1..=3 {
            t.apply(SceneVerb::InpaintDone).unwrap();
            let again = t.reject(3).unwrap();
            assert_eq!(again, round < 3);
            if again {
                assert_eq!(t.status, SceneStatus::Annotated);
                assert!(!seeds.contains(&t.seed));
                seeds.push(t.seed);
            }
        }
        assert!(t.parked);
        assert_eq!(t.status, SceneStatus::Rejected);
    }

    #[test]
    fn placements_checked() {
        let reg = ClassRegistry::default();
        let ok = Placement {
            bbox: [256.0, 411.0, 142.0, 95.0],
            class_id: ClassId(1),
            rationale: Some("near valve".into()),
        };
        assert_eq!(validate_placements(&[ok.clone()], 1024, 1024, &reg).unwrap().len(), 1);
        let out = Placement {
            bbox: [1000.0, 0.0, 50.0, 10.0],
            ..ok.clone()
        };
        assert!(matches!(
            validate_placements(&[ok.clone(), out], 1024, 1024, &reg),
            Err(AnnotationError::Geometry { index: 1, .. })
        ));
        let bad_class = Placement {
            class_id: ClassId(42),
            ..ok
        };
        assert!(matches!(
            validate_placements(&[bad_class], 1024, 1024, &reg),
            Err(AnnotationError::UnknownClass { .. })
        ));
        assert_eq!(validate_placements(&[], 1, 1, &reg), Err(AnnotationError::EmptySubmission));
        assert!("bogus".parse::<SceneStatus>().is_err());
    }
}
