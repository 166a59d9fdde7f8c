//! Training runs: launching a trainer, scoring each checkpoint as it lands,
//! and answering status, stream and evaluation queries.
//!
//! A run directory holds
//!
//! ```text
//! manifest.json                      config, spec, prompt plan, metric set
//! state.json                         latest RunState snapshot
//! checkpoints/<step>/                trainer output
//! samples/<step>/<prompt-hash>/<i>.png
//! samples/<step>/prompts.json        prompt-hash → prompt
//! metrics/<metric>.jsonl             one MetricRecord per checkpoint
//! ```

pub mod presets;
pub mod trainer;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use image::RgbImage;
use parking_lot::{Condvar, Mutex, RwLock};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use presets::{
    preset_hyperparameters, ConfigOverrides, HyperparameterPreset, TrainingConfig, OPTIMIZER_LABEL, SCHEDULER_LABEL,
};
pub use trainer::{MockTrainer, StopFlag, TrainerBackend, TrainerEvent, TrainingJob};

use crate::dataset::{folder_name, DatasetError, ProcessedDataset, BASE_FOLDER};
use crate::imaging;
use crate::intent::{Domain, IntentSpecification, Operation};
use crate::metrics::{
    controllability, rank_scores, stability, KeywordPair, MetricError, MetricLog, MetricRecord, MetricSeries,
    ReferenceSet, SampleBatch, SimilarityScorer,
};
use crate::transformer::PromptPlan;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("no hyperparameter preset for domain {0}")]
    UnknownDomain(Domain),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("run {0} already exists")]
    AlreadyStarted(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("unknown checkpoint {0}")]
    UnknownCheckpoint(String),
    #[error("run {run_id} is {status}, expected {expected}")]
    InvalidState { run_id: String, status: RunStatus, expected: RunStatus },
    #[error("trainer failed to start: {0}")]
    TrainerStart(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Training,
    Stopped,
    Finished,
    Failed,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RunStatus::Pending => "pending",
            RunStatus::Training => "training",
            RunStatus::Stopped => "stopped",
            RunStatus::Finished => "finished",
            RunStatus::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Stability,
    Controllability,
}

/// One metric tracked over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricDefinition {
    pub kind: MetricKind,
    pub concept_name: String,
    /// Prompt whose samples the metric is computed on.
    pub prompt: String,
    /// (intended, opposing); controllability only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<(String, String)>,
}

impl MetricDefinition {
    pub fn id(&self) -> String {
        let kind = match self.kind {
            MetricKind::Stability => "stability",
            MetricKind::Controllability => "controllability",
        };
        format!("{kind}:{}", self.concept_name)
    }

    fn file_name(&self) -> String {
        let id: String = self.id().chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        format!("{id}.jsonl")
    }
}

/// Metrics scored at every checkpoint: stability per keep concept,
/// controllability per modify concept, then overall stability keyed by the
/// trigger word.
pub fn monitoring_metrics(spec: &IntentSpecification, plan: &PromptPlan) -> Vec<MetricDefinition> {
    let trigger = &spec.trigger_word;
    let mut out: Vec<MetricDefinition> = spec
        .concepts_with(Operation::Keep)
        .map(|c| MetricDefinition {
            kind: MetricKind::Stability,
            concept_name: c.name.clone(),
            prompt: PromptPlan::concept_prompt(trigger, &c.name),
            pair: None,
        })
        .collect();
    for c in spec.concepts_with(Operation::Modify) {
        if let Some((intended, opposing)) = plan.controllability_pairs.get(&c.name) {
            out.push(MetricDefinition {
                kind: MetricKind::Controllability,
                concept_name: c.name.clone(),
                prompt: PromptPlan::concept_prompt(trigger, intended),
                pair: Some((intended.clone(), opposing.clone())),
            });
        }
    }
    out.push(MetricDefinition {
        kind: MetricKind::Stability,
        concept_name: trigger.clone(),
        prompt: trigger.clone(),
        pair: None,
    });
    out
}

/// Stability references: each keep/modify concept's crop folder, plus the
/// base images under the trigger word.
pub fn reference_sets(dataset: &ProcessedDataset) -> Result<BTreeMap<String, ReferenceSet>, OrchestratorError> {
    let spec = dataset.spec();
    let mut wanted: Vec<(String, String)> = spec
        .concepts
        .iter()
        .filter(|c| c.operation != Operation::Delete)
        .map(|c| (c.name.clone(), folder_name(&c.name)))
        .collect();
    wanted.push((spec.trigger_word.clone(), BASE_FOLDER.to_string()));
    let mut out = BTreeMap::new();
    for (concept, folder) in wanted {
        let crops = dataset
            .in_folder(&folder)
            .map(|item| dataset.load_image(item))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(concept.clone(), ReferenceSet { concept_name: concept, crops });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub checkpoint_id: String,
    pub run_id: String,
    pub step: u64,
    /// Relative to the run directory.
    pub path: PathBuf,
    /// Relative to the run directory.
    pub cover_image: Option<PathBuf>,
    /// Metric id → value, best first.
    pub intent_scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub status: RunStatus,
    pub config: TrainingConfig,
    pub spec: IntentSpecification,
    pub prompt_plan: PromptPlan,
    pub metrics: Vec<MetricDefinition>,
    pub checkpoints: Vec<Checkpoint>,
    /// Keyed by metric id.
    pub series: BTreeMap<String, MetricSeries<f64>>,
    pub last_step: u64,
    pub dataset_root: PathBuf,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Step { step: u64 },
    Metric { step: u64, metric: String, concept_name: String, value: f64 },
    /// Paths are relative to the run directory.
    Samples { step: u64, prompt: String, images: Vec<PathBuf> },
    Checkpoint { checkpoint_id: String, step: u64, cover_image: Option<PathBuf> },
    Warning { message: String },
    Status { status: RunStatus, reason: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: StreamEvent,
}

/// Generated samples and scores for one checkpoint.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub checkpoint_id: String,
    pub step: u64,
    pub batches: Vec<SampleBatch>,
    /// Metric id → value, best first.
    pub scores: Vec<(String, f64)>,
    /// Metric id → reason for metrics that could not be computed.
    pub failures: Vec<(String, String)>,
}

struct RunHandle {
    dir: PathBuf,
    state: RwLock<RunState>,
    events: Mutex<EventLog>,
    events_cv: Condvar,
    stop: StopFlag,
    references: BTreeMap<String, ReferenceSet>,
    trainer_thread: Mutex<Option<JoinHandle<()>>>,
}

#[derive(Default)]
struct EventLog {
    events: Vec<SequencedEvent>,
    done: bool,
}

impl RunHandle {
    fn push(&self, event: StreamEvent) {
        let mut log = self.events.lock();
        let seq = log.events.len() as u64 + 1;
        log.events.push(SequencedEvent { seq, event });
        self.events_cv.notify_all();
    }

    fn finish(&self) {
        self.events.lock().done = true;
        self.events_cv.notify_all();
    }

    fn persist(&self) -> Result<(), OrchestratorError> {
        let path = self.dir.join("state.json");
        let bytes = serde_json::to_vec_pretty(&*self.state.read())?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Moves to `status` unless the run already ended. Returns whether it moved.
    fn set_status(&self, status: RunStatus, reason: Option<String>) -> bool {
        {
            let mut s = self.state.write();
            if matches!(s.status, RunStatus::Stopped | RunStatus::Finished | RunStatus::Failed) {
                return false;
            }
            s.status = status;
            if status == RunStatus::Failed {
                s.failure = reason.clone();
            }
        }
        self.push(StreamEvent::Status { status, reason });
        if let Err(e) = self.persist() {
            tracing::warn!(error = %e, "could not persist run state");
        }
        true
    }

    fn warn(&self, message: String) {
        tracing::warn!(run = %self.state.read().run_id, "{message}");
        self.state.write().warnings.push(message.clone());
        self.push(StreamEvent::Warning { message });
    }
}

/// Samples `n` images per prompt from one checkpoint, seeds `seed..seed+n`.
fn sample_prompts(
    trainer: &dyn TrainerBackend,
    checkpoint: &Path,
    checkpoint_id: &str,
    step: u64,
    prompts: &[String],
    n: usize,
    seed: u64,
) -> Vec<Result<SampleBatch, String>> {
    prompts
        .par_iter()
        .map(|prompt| {
            let images = (0..n)
                .into_par_iter()
                .map(|i| trainer.generate(checkpoint, prompt, seed + i as u64))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format!("prompt {prompt:?}: {e}"))?;
            Ok(SampleBatch { images, prompt: prompt.clone(), checkpoint_id: checkpoint_id.to_string(), step })
        })
        .collect()
}

fn score_metric(
    def: &MetricDefinition,
    batch: Option<&SampleBatch>,
    references: &BTreeMap<String, ReferenceSet>,
    scorer: &dyn SimilarityScorer<f64>,
) -> Result<f64, String> {
    let batch = batch.ok_or_else(|| format!("no samples for prompt {:?}", def.prompt))?;
    match def.kind {
        MetricKind::Stability => {
            let refs = references
                .get(&def.concept_name)
                .ok_or_else(|| format!("no reference set for {:?}", def.concept_name))?;
            stability(batch, refs, scorer).map_err(|e| e.to_string())
        }
        MetricKind::Controllability => {
            let (intended, opposing) =
                def.pair.clone().ok_or_else(|| format!("no keyword pair for {:?}", def.concept_name))?;
            let pair = KeywordPair { concept_name: def.concept_name.clone(), intended, opposing };
            controllability(batch, &pair, scorer).map_err(|e| e.to_string())
        }
    }
}

fn prompt_dir_name(prompt: &str) -> String {
    imaging::sha256_hex(prompt.as_bytes())[..12].to_string()
}

/// Copies a dataset into `dest` so later edits to the source do not affect a run.
fn snapshot_dataset(dataset: &ProcessedDataset, dest: &Path) -> Result<ProcessedDataset, OrchestratorError> {
    let _ = fs::remove_dir_all(dest);
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let mut manifest = dataset.manifest.clone();
    manifest.items = dataset.items.iter().map(|i| i.record.clone()).collect();
    let manifest_path = dest.join(crate::dataset::MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&manifest_path))?;
    let mut files = Vec::new();
    for item in &dataset.items {
        let rel = PathBuf::from(&item.record.relative_path);
        files.push(rel.with_extension("txt"));
        files.push(rel);
    }
    for rel in files {
        let (from, to) = (dataset.root.join(&rel), dest.join(&rel));
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::copy(&from, &to).map_err(io_err(&from))?;
    }
    Ok(ProcessedDataset::open(dest)?)
}

pub fn checkpoint_id(run_id: &str, step: u64) -> String {
    format!("{run_id}-step-{step:06}")
}

pub struct Orchestrator {
    runs_dir: PathBuf,
    trainer: Arc<dyn TrainerBackend>,
    scorer: Arc<dyn SimilarityScorer<f64>>,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
}

impl Orchestrator {
    pub fn new(
        runs_dir: impl Into<PathBuf>,
        trainer: Arc<dyn TrainerBackend>,
        scorer: Arc<dyn SimilarityScorer<f64>>,
    ) -> Self {
        Self { runs_dir: runs_dir.into(), trainer, scorer, runs: RwLock::new(BTreeMap::new()) }
    }

    /// Like [`Orchestrator::new`], also reloading runs persisted under `runs_dir`.
    /// Runs that were still training are marked failed.
    pub fn open(
        runs_dir: impl Into<PathBuf>,
        trainer: Arc<dyn TrainerBackend>,
        scorer: Arc<dyn SimilarityScorer<f64>>,
    ) -> Result<Self, OrchestratorError> {
        let orch = Self::new(runs_dir, trainer, scorer);
        let entries = match fs::read_dir(&orch.runs_dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(orch),
            Err(e) => return Err(OrchestratorError::Io { path: orch.runs_dir.clone(), source: e }),
        };
        let mut runs = orch.runs.write();
        for entry in entries.flatten() {
            let dir = entry.path();
            let Ok(bytes) = fs::read(dir.join("state.json")) else { continue };
            let mut state: RunState = serde_json::from_slice(&bytes)?;
            if matches!(state.status, RunStatus::Pending | RunStatus::Training) {
                state.status = RunStatus::Failed;
                state.failure = Some("interrupted by restart".into());
            }
            let references = ProcessedDataset::open(&state.dataset_root)
                .ok()
                .and_then(|d| reference_sets(&d).ok())
                .unwrap_or_default();
            let handle = RunHandle {
                dir,
                state: RwLock::new(state.clone()),
                events: Mutex::new(EventLog { events: Vec::new(), done: true }),
                events_cv: Condvar::new(),
                stop: StopFlag::default(),
                references,
                trainer_thread: Mutex::new(None),
            };
            runs.insert(state.run_id.clone(), Arc::new(handle));
        }
        drop(runs);
        Ok(orch)
    }

    pub fn runs_dir(&self) -> &Path {
        &self.runs_dir
    }

    pub fn trainer(&self) -> &dyn TrainerBackend {
        &*self.trainer
    }

    fn handle(&self, run_id: &str) -> Result<Arc<RunHandle>, OrchestratorError> {
        self.runs.read().get(run_id).cloned().ok_or_else(|| OrchestratorError::UnknownRun(run_id.to_string()))
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf, OrchestratorError> {
        Ok(self.handle(run_id)?.dir.clone())
    }

    /// Launches training and returns once the trainer is running.
    pub fn start_run(
        &self,
        run_id: &str,
        dataset: ProcessedDataset,
        config: TrainingConfig,
        plan: PromptPlan,
    ) -> Result<RunState, OrchestratorError> {
        if dataset.is_empty() {
            return Err(OrchestratorError::DatasetEmpty);
        }
        config.validate()?;
        let dir = self.runs_dir.join(run_id);
        if self.runs.read().contains_key(run_id) || dir.join("state.json").exists() {
            return Err(OrchestratorError::AlreadyStarted(run_id.to_string()));
        }
        let dataset = snapshot_dataset(&dataset, &dir.join("dataset"))?;
        let spec = dataset.spec().clone();
        let references = reference_sets(&dataset)?;
        let metrics = monitoring_metrics(&spec, &plan);
        let state = RunState {
            run_id: run_id.to_string(),
            status: RunStatus::Pending,
            config: config.clone(),
            spec,
            prompt_plan: plan,
            metrics,
            checkpoints: Vec::new(),
            series: BTreeMap::new(),
            last_step: 0,
            dataset_root: dataset.root.clone(),
            warnings: Vec::new(),
            failure: None,
        };
        let handle = Arc::new(RunHandle {
            dir: dir.clone(),
            state: RwLock::new(state),
            events: Mutex::new(EventLog::default()),
            events_cv: Condvar::new(),
            stop: StopFlag::default(),
            references,
            trainer_thread: Mutex::new(None),
        });
        {
            let mut runs = self.runs.write();
            if runs.contains_key(run_id) || dir.join("state.json").exists() {
                return Err(OrchestratorError::AlreadyStarted(run_id.to_string()));
            }
            runs.insert(run_id.to_string(), handle.clone());
        }
        let setup = || -> Result<(), OrchestratorError> {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let s = handle.state.read();
            let manifest = serde_json::json!({
                "run_id": s.run_id,
                "config": s.config,
                "spec": s.spec,
                "prompt_plan": s.prompt_plan,
                "metrics": s.metrics,
                "dataset_root": s.dataset_root,
                "trainer": self.trainer.name(),
                "scorer": self.scorer.name(),
            });
            let path = dir.join("manifest.json");
            fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
            drop(s);
            handle.persist()
        };
        if let Err(e) = setup() {
            self.runs.write().remove(run_id);
            return Err(e);
        }

        let (tx, rx) = mpsc::channel();
        let job = TrainingJob { dataset, config, output_dir: dir };
        match self.trainer.start(job, tx, handle.stop.clone()) {
            Ok(thread) => *handle.trainer_thread.lock() = Some(thread),
            Err(e) => {
                handle.set_status(RunStatus::Failed, Some(e.clone()));
                handle.finish();
                return Err(OrchestratorError::TrainerStart(e));
            }
        }
        handle.set_status(RunStatus::Training, None);
        let snapshot = handle.state.read().clone();

        let trainer = self.trainer.clone();
        let scorer = self.scorer.clone();
        let h = handle.clone();
        std::thread::Builder::new()
            .name(format!("run-{run_id}"))
            .spawn(move || event_loop(&h, rx, &*trainer, &*scorer))
            .map_err(|e| OrchestratorError::TrainerStart(e.to_string()))?;
        Ok(snapshot)
    }

    pub fn run_status(&self, run_id: &str) -> Result<RunState, OrchestratorError> {
        Ok(self.handle(run_id)?.state.read().clone())
    }

    pub fn list_runs(&self) -> Vec<RunState> {
        self.runs.read().values().map(|h| h.state.read().clone()).collect()
    }

    /// Stops a training run. Checkpoints already recorded are kept.
    pub fn stop_run(&self, run_id: &str) -> Result<RunState, OrchestratorError> {
        let handle = self.handle(run_id)?;
        let status = handle.state.read().status;
        if status == RunStatus::Training {
            handle.stop.raise();
        }
        if status != RunStatus::Training || !handle.set_status(RunStatus::Stopped, None) {
            return Err(OrchestratorError::InvalidState {
                run_id: run_id.to_string(),
                status: handle.state.read().status,
                expected: RunStatus::Training,
            });
        }
        let state = handle.state.read().clone();
        Ok(state)
    }

    /// Blocks until the run's background work has ended or `timeout` passes.
    pub fn wait(&self, run_id: &str, timeout: Duration) -> Result<RunState, OrchestratorError> {
        let handle = self.handle(run_id)?;
        let deadline = Instant::now() + timeout;
        let mut log = handle.events.lock();
        while !log.done {
            if handle.events_cv.wait_until(&mut log, deadline).timed_out() {
                break;
            }
        }
        drop(log);
        let state = handle.state.read().clone();
        Ok(state)
    }

    /// Events with `seq > after`. Waits up to `timeout` when none are available yet.
    pub fn events_since(
        &self,
        run_id: &str,
        after: u64,
        timeout: Duration,
    ) -> Result<(Vec<SequencedEvent>, bool), OrchestratorError> {
        let handle = self.handle(run_id)?;
        let deadline = Instant::now() + timeout;
        let mut log = handle.events.lock();
        while log.events.len() as u64 <= after && !log.done {
            if handle.events_cv.wait_until(&mut log, deadline).timed_out() {
                break;
            }
        }
        let fresh = log.events.iter().filter(|e| e.seq > after).cloned().collect();
        Ok((fresh, log.done))
    }

    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        self.runs.read().values().flat_map(|h| h.state.read().checkpoints.clone()).collect()
    }

    fn find_checkpoint(&self, checkpoint_id: &str) -> Result<(Arc<RunHandle>, Checkpoint), OrchestratorError> {
        for h in self.runs.read().values() {
            if let Some(c) = h.state.read().checkpoints.iter().find(|c| c.checkpoint_id == checkpoint_id) {
                return Ok((h.clone(), c.clone()));
            }
        }
        Err(OrchestratorError::UnknownCheckpoint(checkpoint_id.to_string()))
    }

    pub fn checkpoint(&self, checkpoint_id: &str) -> Result<(RunState, Checkpoint), OrchestratorError> {
        let (h, c) = self.find_checkpoint(checkpoint_id)?;
        let state = h.state.read().clone();
        Ok((state, c))
    }

    /// Absolute path of a file recorded relative to a run directory.
    pub fn resolve(&self, run_id: &str, relative: &Path) -> Result<PathBuf, OrchestratorError> {
        Ok(self.handle(run_id)?.dir.join(relative))
    }

    pub fn generate(&self, checkpoint_id: &str, prompt: &str, seed: u64) -> Result<RgbImage, OrchestratorError> {
        let (h, c) = self.find_checkpoint(checkpoint_id)?;
        self.trainer.generate(&h.dir.join(&c.path), prompt, seed).map_err(OrchestratorError::Generation)
    }

    /// Scores a checkpoint. With `prompt`, every metric is computed on
    /// samples from that prompt; otherwise each uses its own prompt.
    /// `metrics` replaces the run's metric set when given.
    pub fn evaluate_checkpoint(
        &self,
        checkpoint_id: &str,
        prompt: Option<&str>,
        metrics: Option<Vec<MetricDefinition>>,
        samples: Option<usize>,
    ) -> Result<Evaluation, OrchestratorError> {
        let (h, c) = self.find_checkpoint(checkpoint_id)?;
        let (defs, batch_size, seed) = {
            let s = h.state.read();
            (metrics.unwrap_or_else(|| s.metrics.clone()), s.config.batch_size as usize, s.config.seed)
        };
        let n = samples.unwrap_or(batch_size).max(1);
        let prompts: Vec<String> = match prompt {
            Some(p) => vec![p.to_string()],
            None => {
                let mut v: Vec<String> = Vec::new();
                for d in &defs {
                    if !v.contains(&d.prompt) {
                        v.push(d.prompt.clone());
                    }
                }
                v
            }
        };
        let ckpt_dir = h.dir.join(&c.path);
        let mut batches = Vec::new();
        for r in sample_prompts(&*self.trainer, &ckpt_dir, checkpoint_id, c.step, &prompts, n, seed) {
            batches.push(r.map_err(OrchestratorError::Generation)?);
        }
        let by_prompt: BTreeMap<&str, &SampleBatch> = batches.iter().map(|b| (b.prompt.as_str(), b)).collect();
        let mut scores = Vec::new();
        let mut failures = Vec::new();
        for d in &defs {
            let batch = match prompt {
                Some(p) => by_prompt.get(p).copied(),
                None => by_prompt.get(d.prompt.as_str()).copied(),
            };
            match score_metric(d, batch, &h.references, &*self.scorer) {
                Ok(v) => scores.push((d.id(), v)),
                Err(e) => failures.push((d.id(), e)),
            }
        }
        Ok(Evaluation { checkpoint_id: checkpoint_id.to_string(), step: c.step, batches, scores: rank_scores(scores), failures })
    }
}

fn event_loop(
    handle: &RunHandle,
    rx: mpsc::Receiver<TrainerEvent>,
    trainer: &dyn TrainerBackend,
    scorer: &dyn SimilarityScorer<f64>,
) {
    let mut ended = false;
    for event in rx {
        if handle.stop.is_raised() {
            break;
        }
        match event {
            TrainerEvent::StepCompleted { step } => {
                handle.state.write().last_step = step;
                handle.push(StreamEvent::Step { step });
            }
            TrainerEvent::CheckpointSaved { path, step } => {
                if let Err(e) = on_checkpoint(handle, &path, step, trainer, scorer) {
                    handle.warn(format!("checkpoint at step {step}: {e}"));
                }
            }
            TrainerEvent::Finished => {
                handle.set_status(RunStatus::Finished, None);
                ended = true;
                break;
            }
            TrainerEvent::Failed { reason } => {
                handle.set_status(RunStatus::Failed, Some(reason));
                ended = true;
                break;
            }
        }
    }
    if let Some(t) = handle.trainer_thread.lock().take() {
        if t.join().is_err() && !ended && !handle.stop.is_raised() {
            ended = handle.set_status(RunStatus::Failed, Some("trainer thread panicked".into()));
        }
    }
    if !ended && !handle.stop.is_raised() {
        handle.set_status(RunStatus::Failed, Some("trainer exited without finishing".into()));
    }
    if let Err(e) = handle.persist() {
        tracing::warn!(error = %e, "could not persist run state");
    }
    handle.finish();
}

/// Samples every monitoring prompt at a new checkpoint, scores the run's
/// metrics and records the results. A metric that cannot be computed is
/// reported as a warning and skipped.
fn on_checkpoint(
    handle: &RunHandle,
    checkpoint_path: &Path,
    step: u64,
    trainer: &dyn TrainerBackend,
    scorer: &dyn SimilarityScorer<f64>,
) -> Result<(), OrchestratorError> {
    let (run_id, prompts, defs, batch_size, seed, sample_every) = {
        let s = handle.state.read();
        let mut prompts = s.prompt_plan.monitoring_prompts.clone();
        for d in &s.metrics {
            if !prompts.contains(&d.prompt) {
                prompts.push(d.prompt.clone());
            }
        }
        (s.run_id.clone(), prompts, s.metrics.clone(), s.config.batch_size as usize, s.config.seed, s.config.sample_every_steps)
    };
    let relative = checkpoint_path.strip_prefix(&handle.dir).unwrap_or(checkpoint_path).to_path_buf();
    let id = checkpoint_id(&run_id, step);
    let sample_now = sample_every == 0 || step.is_multiple_of(sample_every);

    let mut batches: BTreeMap<String, SampleBatch> = BTreeMap::new();
    let mut cover = None;
    let mut sample_paths: Vec<(String, Vec<PathBuf>)> = Vec::new();
    if sample_now {
        let step_dir = handle.dir.join("samples").join(step.to_string());
        let mut index = BTreeMap::new();
        let results = sample_prompts(trainer, checkpoint_path, &id, step, &prompts, batch_size, seed);
        for (prompt, result) in prompts.iter().zip(results) {
            let batch = match result {
                Ok(b) => b,
                Err(e) => {
                    handle.warn(format!("sampling at step {step}: {e}"));
                    continue;
                }
            };
            let hash = prompt_dir_name(prompt);
            let dir = step_dir.join(&hash);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut paths = Vec::new();
            for (i, img) in batch.images.iter().enumerate() {
                let path = dir.join(format!("{i}.png"));
                fs::write(&path, imaging::encode_png(img)).map_err(io_err(&path))?;
                paths.push(PathBuf::from("samples").join(step.to_string()).join(&hash).join(format!("{i}.png")));
            }
            if cover.is_none() {
                cover = paths.first().cloned();
            }
            sample_paths.push((prompt.clone(), paths));
            index.insert(hash, prompt.clone());
            batches.insert(prompt.clone(), batch);
        }
        let index_path = step_dir.join("prompts.json");
        fs::create_dir_all(&step_dir).map_err(io_err(&step_dir))?;
        fs::write(&index_path, serde_json::to_vec_pretty(&index)?).map_err(io_err(&index_path))?;
    }

    let mut scores = Vec::new();
    for d in &defs {
        if !sample_now {
            break;
        }
        match score_metric(d, batches.get(&d.prompt), &handle.references, scorer) {
            Ok(v) => scores.push((d, v)),
            Err(e) => handle.warn(format!("{} at step {step}: {e}", d.id())),
        }
    }

    if handle.stop.is_raised() {
        return Ok(());
    }
    {
        let mut s = handle.state.write();
        for (d, v) in &scores {
            let series =
                s.series.entry(d.id()).or_insert_with(|| MetricSeries::new(d.id(), d.concept_name.clone()));
            series.append_point(step, *v)?;
        }
        s.checkpoints.push(Checkpoint {
            checkpoint_id: id.clone(),
            run_id: run_id.clone(),
            step,
            path: relative,
            cover_image: cover.clone(),
            intent_scores: rank_scores(scores.iter().map(|(d, v)| (d.id(), *v)).collect()),
        });
    }
    for (d, v) in &scores {
        let log = MetricLog::new(handle.dir.join("metrics").join(d.file_name()));
        log.append(&MetricRecord {
            step,
            value: *v,
            metric_name: d.id(),
            concept_name: d.concept_name.clone(),
            prompt: d.prompt.clone(),
        })?;
        handle.push(StreamEvent::Metric { step, metric: d.id(), concept_name: d.concept_name.clone(), value: *v });
    }
    for (prompt, images) in sample_paths {
        handle.push(StreamEvent::Samples { step, prompt, images });
    }
    handle.push(StreamEvent::Checkpoint { checkpoint_id: id, step, cover_image: cover });
    handle.persist()
}
