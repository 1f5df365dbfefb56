//! On-disk state of the placement/review loop.
//!
//! Layout under the data directory:
//! `annotations.json` (COCO), `state.json` (tasks plus inpainting chains),
//! `corpus.json` (accepted scenes), `scenes/`, `masks/`, `corpus/`,
//! `renders/` (orchestrator output) and `writes.log`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spillkit_core::annotation::{
    reseed, validate_placements, AnnotationError, Placement, SceneStatus, SceneTask, SceneVerb,
};
use spillkit_core::classes::ClassRegistry;
use spillkit_core::dataset::{CocoAnnotation, CocoDataset, CocoImage};
use spillkit_core::generation::{build_inpaint_job, ImageRef, InpaintJob, InpaintProfile, MaskRef};
use spillkit_core::mask::{default_mask_ramps, render_mask_with, save_mask, sidecar_path, MaskSidecar, MaskSpec};
use spillkit_core::prompts::PromptBank;
use spillkit_core::util::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("no scene '{0}'")]
    NotFound(String),
    #[error("scene '{0}' already exists")]
    Duplicate(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("preparing inpainting: {0}")]
    Prepare(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone)]
pub struct StoreSettings {
    pub classes: ClassRegistry,
    pub prompts: PromptBank,
    pub inpaint: InpaintProfile,
    pub max_rejects: u32,
    pub page_size: usize,
}

impl Default for StoreSettings {
    fn default() -> Self {
        Self {
            classes: ClassRegistry::default(),
            prompts: PromptBank::default(),
            inpaint: InpaintProfile::default(),
            max_rejects: 3,
            page_size: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStatus {
    Queued,
    Running,
    Done,
    Failed,
}

/// The inpainting jobs of one variant of one round, applied in order: each
/// job after the first paints onto the previous job's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintChain {
    pub chain_id: String,
    pub scene_id: String,
    pub round: u32,
    pub variant: u32,
    pub jobs: Vec<InpaintJob>,
    pub status: ChainStatus,
    pub output: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct State {
    tasks: Vec<SceneTask>,
    chains: Vec<InpaintChain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub scene_id: String,
    pub image: ImageRef,
    pub image_id: u64,
    pub annotations: Vec<CocoAnnotation>,
    pub masks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPage {
    pub tasks: Vec<SceneTask>,
    pub next_cursor: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

pub struct AnnotationStore {
    dir: PathBuf,
    settings: StoreSettings,
    state: State,
    coco: CocoDataset,
    corpus: Vec<CorpusEntry>,
    write_seq: u64,
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T, StoreError> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Io(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(T::default()),
        Err(e) => Err(io_err(path)(e)),
    }
}

impl AnnotationStore {
    pub fn open(dir: impl Into<PathBuf>, settings: StoreSettings) -> Result<Self, StoreError> {
        let dir = dir.into();
        settings
            .inpaint
            .validate()
            .map_err(|e| StoreError::Validation(e.to_string()))?;
        default_mask_ramps()
            .get(&settings.inpaint.mask_ramp)
            .map_err(|e| StoreError::Validation(e.to_string()))?;
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut state: State = read_json(&dir.join("state.json"))?;
        // Chains caught mid-flight by a restart run again.
        for c in &mut state.chains {
            if c.status == ChainStatus::Running {
                c.status = ChainStatus::Queued;
            }
        }
        let mut coco: CocoDataset = read_json(&dir.join("annotations.json"))?;
        if coco.categories.is_empty() {
            coco.categories = CocoDataset::categories_from(&settings.classes);
        }
        let corpus = read_json(&dir.join("corpus.json"))?;
        let write_seq = std::fs::read_to_string(dir.join("writes.log"))
            .map(|s| s.lines().count() as u64)
            .unwrap_or(0);
        Ok(Self {
            dir,
            settings,
            state,
            coco,
            corpus,
            write_seq,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn settings(&self) -> &StoreSettings {
        &self.settings
    }

    pub fn renders_dir(&self) -> PathBuf {
        self.dir.join("renders")
    }

    pub fn coco(&self) -> &CocoDataset {
        &self.coco
    }

    pub fn corpus(&self) -> &[CorpusEntry] {
        &self.corpus
    }

    pub fn chains(&self) -> &[InpaintChain] {
        &self.state.chains
    }

    fn log_write(&mut self, scene: &str, phase: &str) -> Result<(), StoreError> {
        self.write_seq += 1;
        let path = self.dir.join("writes.log");
        let line = json!({ "seq": self.write_seq, "scene": scene, "phase": phase, "file": "annotations.json" });
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(f, "{line}").map_err(io_err(&path))
    }

    /// Writes the COCO file bracketed by begin/end lines in the write log, then
    /// the task state. Callers hold the store exclusively, so brackets from
    /// different scenes never nest.
    fn persist(&mut self, scene: &str) -> Result<(), StoreError> {
        self.log_write(scene, "begin")?;
        let ann = self.dir.join("annotations.json");
        write_atomic(&ann, self.coco.to_json_pretty().as_bytes()).map_err(io_err(&ann))?;
        self.log_write(scene, "end")?;
        self.persist_state()
    }

    fn persist_state(&self) -> Result<(), StoreError> {
        let path = self.dir.join("state.json");
        let bytes = serde_json::to_vec_pretty(&self.state).expect("state serializes");
        write_atomic(&path, &bytes).map_err(io_err(&path))
    }

    fn persist_corpus(&self) -> Result<(), StoreError> {
        let path = self.dir.join("corpus.json");
        let bytes = serde_json::to_vec_pretty(&self.corpus).expect("corpus serializes");
        write_atomic(&path, &bytes).map_err(io_err(&path))
    }

    fn index(&self, scene_id: &str) -> Result<usize, StoreError> {
        self.state
            .tasks
            .iter()
            .position(|t| t.scene_id == scene_id)
            .ok_or_else(|| StoreError::NotFound(scene_id.to_string()))
    }

    pub fn get(&self, scene_id: &str) -> Result<&SceneTask, StoreError> {
        Ok(&self.state.tasks[self.index(scene_id)?])
    }

    /// Copies a generated scene into the store as a new pending task.
    pub fn import_scene(&mut self, scene_id: &str, source: &Path, seed: u64) -> Result<SceneTask, StoreError> {
        if scene_id.is_empty() || !scene_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
            return Err(StoreError::Validation(format!("invalid scene id '{scene_id}'")));
        }
        if self.index(scene_id).is_ok() {
            return Err(StoreError::Duplicate(scene_id.to_string()));
        }
        let bytes = std::fs::read(source).map_err(io_err(source))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| StoreError::Validation(format!("{}: {e}", source.display())))?;
        let ext = source.extension().and_then(|e| e.to_str()).unwrap_or("png");
        let file_name = format!("{scene_id}.{ext}");
        let dest = self.dir.join("scenes").join(&file_name);
        write_atomic(&dest, &bytes).map_err(io_err(&dest))?;
        let image_id = self.coco.next_image_id();
        self.coco.images.push(CocoImage {
            id: image_id,
            file_name,
            width: img.width(),
            height: img.height(),
            extra: Default::default(),
        });
        let image = ImageRef {
            path: dest.to_string_lossy().into_owned(),
            width: img.width(),
            height: img.height(),
        };
        let task = SceneTask::new(scene_id, image, image_id, seed);
        self.state.tasks.push(task.clone());
        self.persist(scene_id)?;
        Ok(task)
    }

    /// Tasks in creation order. The cursor is the opaque `next_cursor` of a
    /// previous page.
    pub fn list(&self, status: Option<&str>, cursor: Option<&str>, limit: Option<usize>) -> Result<TaskPage, StoreError> {
        let status = status.map(str::parse::<SceneStatus>).transpose()?;
        let start = match cursor {
            None | Some("") => 0,
            Some(c) => c
                .strip_prefix('c')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n <= self.state.tasks.len())
                .ok_or_else(|| StoreError::Validation(format!("bad cursor '{c}'")))?,
        };
        let limit = limit.unwrap_or(self.settings.page_size).max(1);
        let mut tasks = Vec::new();
        let mut next_cursor = None;
        for (i, t) in self.state.tasks.iter().enumerate().skip(start) {
            if status.is_some_and(|s| s != t.status) {
                continue;
            }
            if tasks.len() == limit {
                next_cursor = Some(format!("c{i}"));
                break;
            }
            tasks.push(t.clone());
        }
        Ok(TaskPage { tasks, next_cursor })
    }

    fn job_seed(task_seed: u64, variant: u32, box_index: usize) -> u64 {
        let base = if variant == 0 {
            task_seed
        } else {
            reseed(task_seed, 1000 + variant)
        };
        base.wrapping_add(box_index as u64)
    }

    /// Inpainting chains for the task's current boxes and seed.
    fn plan_round(&self, task: &SceneTask) -> Result<Vec<InpaintChain>, StoreError> {
        let profile = &self.settings.inpaint;
        let mut masks = Vec::new();
        for ann_id in &task.annotation_ids {
            let path = self.mask_path(&task.scene_id, *ann_id);
            let side: MaskSidecar = serde_json::from_slice(
                &std::fs::read(sidecar_path(&path)).map_err(io_err(&path))?,
            )
            .map_err(|e| StoreError::Prepare(e.to_string()))?;
            masks.push(MaskRef {
                path: path.to_string_lossy().into_owned(),
                spec: side.spec,
                width: side.width,
                height: side.height,
            });
        }
        let mut chains = Vec::new();
        for variant in 0..profile.variants_per_box {
            let mut jobs = Vec::new();
            for (k, (p, mask)) in task.placements.iter().zip(&masks).enumerate() {
                let name = self
                    .settings
                    .classes
                    .name(p.class_id)
                    .map_err(|e| StoreError::Prepare(e.to_string()))?;
                let job = build_inpaint_job(
                    &task.image,
                    mask,
                    p.class_id,
                    name,
                    &self.settings.prompts,
                    profile,
                    Self::job_seed(task.seed, variant, k),
                )
                .map_err(|e| StoreError::Prepare(e.to_string()))?;
                jobs.push(job);
            }
            chains.push(InpaintChain {
                chain_id: format!("{}-r{}-v{}", task.scene_id, task.rejects, variant),
                scene_id: task.scene_id.clone(),
                round: task.rejects,
                variant,
                jobs,
                status: ChainStatus::Queued,
                output: None,
                error: None,
            });
        }
        Ok(chains)
    }

    fn mask_path(&self, scene_id: &str, ann_id: u64) -> PathBuf {
        self.dir.join("masks").join(format!("{scene_id}_{ann_id}.png"))
    }

    /// Records the boxes, renders one mask per box from the same coordinates,
    /// and queues the inpainting round. Nothing is persisted unless every
    /// step succeeds.
    pub fn submit(
        &mut self,
        scene_id: &str,
        placements: Vec<Placement>,
        expected_version: Option<u64>,
    ) -> Result<SceneTask, StoreError> {
        let idx = self.index(scene_id)?;
        let mut task = self.state.tasks[idx].clone();
        task.check_version(expected_version)?;
        let boxes = validate_placements(&placements, task.image.width, task.image.height, &self.settings.classes)?;
        task.apply(SceneVerb::Submit)?;
        if task.parked {
            task.parked = false;
            task.rejects = 0;
        }

        let old: BTreeSet<u64> = task.annotation_ids.iter().copied().collect();
        let mut coco = self.coco.clone();
        coco.annotations.retain(|a| !(a.image_id == task.image_id && a.id.is_some_and(|id| old.contains(&id))));
        let ramp = default_mask_ramps()
            .get(&self.settings.inpaint.mask_ramp)
            .map_err(|e| StoreError::Prepare(e.to_string()))?;
        let mut next_id = coco.next_annotation_id();
        let mut ids = Vec::new();
        let mut stored = Vec::new();
        for (p, b) in placements.iter().zip(&boxes) {
            let id = next_id;
            next_id += 1;
            let mut extra = serde_json::Map::new();
            if let Some(r) = &p.rationale {
                extra.insert("rationale".into(), Value::String(r.clone()));
            }
            coco.annotations.push(CocoAnnotation {
                id: Some(id),
                image_id: task.image_id,
                category_id: p.class_id,
                bbox: b.to_xywh(),
                score: None,
                extra,
            });
            let spec = MaskSpec::new(*b, self.settings.inpaint.feather_px, self.settings.inpaint.opacity)
                .map_err(|e| StoreError::Prepare(e.to_string()))?;
            let mask = render_mask_with(ramp.as_ref(), &spec, task.image.width, task.image.height)
                .map_err(|e| StoreError::Prepare(e.to_string()))?;
            save_mask(&mask, &spec, &self.settings.inpaint.mask_ramp, &self.mask_path(scene_id, id))
                .map_err(|e| StoreError::Prepare(e.to_string()))?;
            ids.push(id);
            stored.push(Placement {
                bbox: b.to_xywh(),
                ..p.clone()
            });
        }
        task.placements = stored;
        task.annotation_ids = ids;
        task.preview = None;
        task.alternates.clear();
        task.last_error = None;
        let chains = self.plan_round(&task)?;
        task.jobs = chains
            .iter()
            .flat_map(|c| c.jobs.iter().map(|j| spillkit_core::generation::DiffusionJob::Inpaint(j.clone()).job_id()))
            .collect();

        self.coco = coco;
        self.state.chains.retain(|c| c.scene_id != scene_id);
        self.state.chains.extend(chains);
        self.state.tasks[idx] = task.clone();
        self.persist(scene_id)?;
        Ok(task)
    }

    /// Hands out every queued chain and marks it running.
    pub fn take_queued(&mut self) -> Result<Vec<InpaintChain>, StoreError> {
        let mut out = Vec::new();
        for c in &mut self.state.chains {
            if c.status == ChainStatus::Queued {
                c.status = ChainStatus::Running;
                out.push(c.clone());
            }
        }
        if !out.is_empty() {
            self.persist_state()?;
        }
        Ok(out)
    }

    /// Records the outcome of a chain. When the last chain of the scene's
    /// current round finishes, the scene moves to `inpainted`. Outcomes for
    /// superseded rounds are dropped.
    pub fn complete_chain(&mut self, chain_id: &str, outcome: Result<String, String>) -> Result<(), StoreError> {
        let Some(ci) = self.state.chains.iter().position(|c| c.chain_id == chain_id) else {
            return Ok(());
        };
        let chain = &mut self.state.chains[ci];
        match outcome {
            Ok(path) => {
                chain.status = ChainStatus::Done;
                chain.output = Some(path);
                chain.error = None;
            }
            Err(e) => {
                chain.status = ChainStatus::Failed;
                chain.error = Some(e);
            }
        }
        let scene_id = chain.scene_id.clone();
        let round = chain.round;
        let idx = self.index(&scene_id)?;
        let mine: Vec<&InpaintChain> = self
            .state
            .chains
            .iter()
            .filter(|c| c.scene_id == scene_id && c.round == round)
            .collect();
        let task = &mut self.state.tasks[idx];
        if task.status != SceneStatus::Annotated || task.rejects != round {
            return self.persist_state();
        }
        if let Some(failed) = mine.iter().find(|c| c.status == ChainStatus::Failed) {
            task.last_error = failed.error.clone();
            task.version += 1;
        } else if mine.iter().all(|c| c.status == ChainStatus::Done) {
            let mut outputs = mine.iter().filter_map(|c| c.output.clone());
            task.preview = outputs.next();
            task.alternates = outputs.collect();
            task.last_error = None;
            task.apply(SceneVerb::InpaintDone)?;
        }
        self.persist_state()
    }

    /// Puts the failed chains of an annotated scene back in the queue.
    pub fn retry_failed(&mut self, scene_id: &str) -> Result<SceneTask, StoreError> {
        let idx = self.index(scene_id)?;
        let mut n = 0;
        for c in &mut self.state.chains {
            if c.scene_id == scene_id && c.status == ChainStatus::Failed {
                c.status = ChainStatus::Queued;
                c.error = None;
                n += 1;
            }
        }
        if n == 0 {
            return Err(StoreError::Validation(format!("scene '{scene_id}' has no failed jobs")));
        }
        let task = &mut self.state.tasks[idx];
        task.last_error = None;
        task.version += 1;
        let task = task.clone();
        self.persist_state()?;
        Ok(task)
    }

    pub fn review(&mut self, scene_id: &str, verdict: Verdict, expected_version: Option<u64>) -> Result<SceneTask, StoreError> {
        let idx = self.index(scene_id)?;
        let mut task = self.state.tasks[idx].clone();
        task.check_version(expected_version)?;
        match verdict {
            Verdict::Accept => {
                task.apply(SceneVerb::Accept)?;
                let entry = self.corpus_entry(&task)?;
                self.corpus.retain(|e| e.scene_id != scene_id);
                self.corpus.push(entry);
                self.state.tasks[idx] = task.clone();
                self.persist_state()?;
                self.persist_corpus()?;
            }
            Verdict::Reject => {
                let again = task.reject(self.settings.max_rejects)?;
                self.state.chains.retain(|c| c.scene_id != scene_id);
                if again {
                    let chains = self.plan_round(&task)?;
                    task.jobs = chains
                        .iter()
                        .flat_map(|c| c.jobs.iter().map(|j| spillkit_core::generation::DiffusionJob::Inpaint(j.clone()).job_id()))
                        .collect();
                    self.state.chains.extend(chains);
                } else {
                    task.jobs.clear();
                }
                self.state.tasks[idx] = task.clone();
                self.persist_state()?;
            }
        }
        Ok(task)
    }

    fn corpus_entry(&self, task: &SceneTask) -> Result<CorpusEntry, StoreError> {
        let preview = task
            .preview
            .as_deref()
            .ok_or_else(|| StoreError::Prepare(format!("scene '{}' has no preview", task.scene_id)))?;
        let src = Path::new(preview);
        let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("png");
        let dest = self.dir.join("corpus").join(format!("{}.{ext}", task.scene_id));
        let bytes = std::fs::read(src).map_err(io_err(src))?;
        write_atomic(&dest, &bytes).map_err(io_err(&dest))?;
        let ids: BTreeSet<u64> = task.annotation_ids.iter().copied().collect();
        let annotations = self
            .coco
            .annotations
            .iter()
            .filter(|a| a.image_id == task.image_id && a.id.is_some_and(|id| ids.contains(&id)))
            .cloned()
            .collect();
        Ok(CorpusEntry {
            scene_id: task.scene_id.clone(),
            image: ImageRef {
                path: dest.to_string_lossy().into_owned(),
                width: task.image.width,
                height: task.image.height,
            },
            image_id: task.image_id,
            annotations,
            masks: task
                .annotation_ids
                .iter()
                .map(|id| self.mask_path(&task.scene_id, *id).to_string_lossy().into_owned())
                .collect(),
        })
    }

    /// Cross-checks the corpus against the COCO file and the mask sidecars.
    /// Returns one message per inconsistency.
    pub fn verify_corpus(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
        for a in &self.coco.annotations {
            by_image.entry(a.image_id).or_default().push(a);
        }
        for e in &self.corpus {
            if !Path::new(&e.image.path).is_file() {
                problems.push(format!("{}: image {} missing", e.scene_id, e.image.path));
            }
            let coco: Vec<&CocoAnnotation> = by_image.get(&e.image_id).cloned().unwrap_or_default();
            let mine: Vec<&CocoAnnotation> = e.annotations.iter().collect();
            if coco != mine {
                problems.push(format!("{}: annotations differ from the COCO file", e.scene_id));
            }
            if e.masks.len() != e.annotations.len() {
                problems.push(format!("{}: {} masks for {} annotations", e.scene_id, e.masks.len(), e.annotations.len()));
            }
            for (a, m) in e.annotations.iter().zip(&e.masks) {
                let side = std::fs::read(sidecar_path(Path::new(m)))
                    .ok()
                    .and_then(|b| serde_json::from_slice::<MaskSidecar>(&b).ok());
                match side {
                    None => problems.push(format!("{}: mask sidecar for {m} unreadable", e.scene_id)),
                    Some(s) if s.spec.bbox.to_xywh() != a.bbox => problems.push(format!(
                        "{}: mask bbox {:?} != annotation bbox {:?}",
                        e.scene_id,
                        s.spec.bbox.to_xywh(),
                        a.bbox
                    )),
                    Some(_) => {}
                }
            }
        }
        problems
    }
}
