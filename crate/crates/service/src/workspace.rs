//! Project store and the workflow operations behind every endpoint and CLI
//! subcommand.
//!
//! ```text
//! <root>/projects/<project_id>/project.json
//! <root>/projects/<project_id>/images/<image_id>.png
//! <root>/projects/<project_id>/detections.json   optional fixture detector
//! <root>/projects/<project_id>/dataset/          processed dataset
//! <root>/runs/<run_id>/                          orchestrator run directories
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use intenttune_core::augment::Thresholds;
use intenttune_core::caption::{Caption, RuleRewriter};
use intenttune_core::dataset::{build_dataset, propagate_edit, AugmentBackends, EditScope, ImageFailure, ProcessedDataset};
use intenttune_core::imaging::{self, SourceImage};
use intenttune_core::intent::{parse_annotated_text, validate_against_input, IntentSpecification, Region};
use intenttune_core::mock::{FixtureDetector, HashEmbedder, HashScorer, MeanFillInpainter, PaletteCaptioner};
use intenttune_core::orchestrator::{
    ConfigOverrides, MetricDefinition, MockTrainer, Orchestrator, RunState, SequencedEvent, TrainingConfig,
};
use intenttune_core::transformer::{
    recommend_prompts, transform_intent, CompletionClient, LlmBackend, PromptPlan, RuleBackend, TransformRequest,
    TransformerBackend,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ServiceConfig, TransformerChoice};
use crate::error::{ServiceError, ServiceResult};
use crate::llm::HttpCompletionClient;

const PROJECT_FILE: &str = "project.json";
const DETECTIONS_FILE: &str = "detections.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Of the uploaded bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub text: String,
    pub regions: Vec<Region>,
    pub backend: TransformerChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub folders: BTreeMap<String, usize>,
    pub items: usize,
    pub failures: Vec<ImageFailure>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: String,
    pub name: String,
    pub images: Vec<ImageRecord>,
    pub intent: Option<IntentRecord>,
    pub spec: Option<IntentSpecification>,
    pub prompt_plan: Option<PromptPlan>,
    /// Cleared whenever the spec changes.
    pub dataset: Option<DatasetSummary>,
    pub runs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentRequest {
    pub text: String,
    #[serde(default)]
    pub regions: Vec<Region>,
    #[serde(default)]
    pub backend: Option<TransformerChoice>,
    /// Explicit concepts for the rule backend.
    #[serde(default)]
    pub structured: Option<IntentSpecification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResponse {
    pub spec: IntentSpecification,
    pub prompt_plan: PromptPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionView {
    pub relative_path: String,
    pub folder: String,
    pub source_image_id: String,
    pub image_url: String,
    pub caption: Caption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreView {
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelView {
    pub checkpoint_id: String,
    pub run_id: String,
    pub step: u64,
    pub cover_url: Option<String>,
    /// Best first.
    pub intent_scores: Vec<ScoreView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub project_id: String,
    /// Prefix for the relative paths in `state` and in stream events.
    pub files_url: String,
    #[serde(flatten)]
    pub state: RunState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsView {
    pub run_id: String,
    pub files_url: String,
    pub events: Vec<SequencedEvent>,
    /// No further events will arrive.
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub metrics: Option<Vec<MetricDefinition>>,
    #[serde(default)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub prompt: String,
    pub image_urls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureView {
    pub metric: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationView {
    pub checkpoint_id: String,
    pub step: u64,
    /// Best first.
    pub scores: Vec<ScoreView>,
    pub failures: Vec<FailureView>,
    pub samples: Vec<SampleView>,
}

fn scores(v: &[(String, f64)]) -> Vec<ScoreView> {
    v.iter().map(|(metric, value)| ScoreView { metric: metric.clone(), value: *value }).collect()
}

/// Rejects absolute paths and `..` so a request cannot escape its directory.
pub fn safe_relative(path: &str) -> ServiceResult<PathBuf> {
    let p = Path::new(path);
    if path.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ServiceError::invalid("invalid_path", format!("{path:?} is not a plain relative path")));
    }
    Ok(p.to_path_buf())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> ServiceResult<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> ServiceResult<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Workspace {
    root: PathBuf,
    config: ServiceConfig,
    orchestrator: Orchestrator,
    /// Serializes project creation and run-id allocation.
    registry_lock: Mutex<()>,
    project_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    llm_client: Option<Arc<dyn CompletionClient>>,
}

impl Workspace {
    pub fn open(config: ServiceConfig) -> ServiceResult<Self> {
        let root = config.workspace.clone();
        fs::create_dir_all(root.join("projects"))?;
        let trainer = MockTrainer::default().with_epoch_delay(Duration::from_millis(config.trainer.epoch_delay_ms));
        let orchestrator = Orchestrator::open(root.join("runs"), Arc::new(trainer), Arc::new(HashScorer::default()))?;
        Ok(Self {
            root,
            config,
            orchestrator,
            registry_lock: Mutex::new(()),
            project_locks: Mutex::new(HashMap::new()),
            llm_client: None,
        })
    }

    /// Uses `client` for the language-model backend instead of the configured endpoint.
    pub fn with_llm_client(mut self, client: Arc<dyn CompletionClient>) -> Self {
        self.llm_client = Some(client);
        self
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    fn project_dir(&self, project_id: &str) -> PathBuf {
        self.root.join("projects").join(project_id)
    }

    fn lock(&self, project_id: &str) -> Arc<Mutex<()>> {
        self.project_locks.lock().entry(project_id.to_string()).or_default().clone()
    }

    fn save(&self, project: &Project) -> ServiceResult<()> {
        write_json(&self.project_dir(&project.project_id).join(PROJECT_FILE), project)
    }

    pub fn list_projects(&self) -> ServiceResult<Vec<Project>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("projects"))?.flatten() {
            let file = entry.path().join(PROJECT_FILE);
            if file.exists() {
                out.push(read_json::<Project>(&file)?);
            }
        }
        out.sort_by(|a, b| a.project_id.cmp(&b.project_id));
        Ok(out)
    }

    /// Looks a project up by id, then by name.
    pub fn project(&self, key: &str) -> ServiceResult<Project> {
        if !key.is_empty() && safe_relative(key).is_ok() {
            let file = self.project_dir(key).join(PROJECT_FILE);
            if file.exists() {
                return read_json(&file);
            }
        }
        self.list_projects()?
            .into_iter()
            .find(|p| p.name == key)
            .ok_or_else(|| ServiceError::not_found("unknown_project", format!("unknown project {key}")))
    }

    pub fn create_project(&self, name: &str) -> ServiceResult<Project> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ServiceError::invalid("invalid_name", "project name must be non-empty"));
        }
        let _guard = self.registry_lock.lock();
        let existing = self.list_projects()?;
        if existing.iter().any(|p| p.name == name) {
            return Err(ServiceError::precondition("duplicate_name", format!("a project named {name:?} exists"))
                .with_detail(json!({"name": name})));
        }
        let project_id = format!("proj-{:04}", existing.len() + 1);
        fs::create_dir_all(self.project_dir(&project_id).join("images"))?;
        let project = Project {
            project_id,
            name: name.to_string(),
            images: Vec::new(),
            intent: None,
            spec: None,
            prompt_plan: None,
            dataset: None,
            runs: Vec::new(),
        };
        self.save(&project)?;
        Ok(project)
    }

    /// Stores every file or none: one undecodable file rejects the batch.
    pub fn upload_images(&self, key: &str, files: Vec<(String, Vec<u8>)>) -> ServiceResult<Vec<ImageRecord>> {
        let project_id = self.project(key)?.project_id;
        let lock = self.lock(&project_id);
        let _guard = lock.lock();
        let mut project = self.project(&project_id)?;
        if files.is_empty() {
            return Err(ServiceError::invalid("no_files", "upload contained no files"));
        }
        let mut decoded = Vec::new();
        for (file_name, bytes) in files {
            let img = imaging::decode_image(&bytes).map_err(|e| {
                ServiceError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_format", format!("{file_name}: {e}"))
                    .with_detail(json!({"file_name": file_name}))
            })?;
            decoded.push((file_name, imaging::sha256_hex(&bytes), img));
        }
        let mut added = Vec::new();
        for (file_name, sha256, img) in decoded {
            let image_id = format!("img-{:04}", project.images.len() + 1);
            fs::write(self.image_path(&project_id, &image_id), imaging::encode_png(&img))?;
            let rec = ImageRecord { image_id, file_name, width: img.width(), height: img.height(), sha256 };
            project.images.push(rec.clone());
            added.push(rec);
        }
        self.save(&project)?;
        Ok(added)
    }

    pub fn image_path(&self, project_id: &str, image_id: &str) -> PathBuf {
        self.project_dir(project_id).join("images").join(format!("{image_id}.png"))
    }

    /// Installs the boxes the fixture detector reports, keyed by image id or upload file name.
    pub fn set_detections(&self, key: &str, detector: &FixtureDetector) -> ServiceResult<()> {
        let project_id = self.project(key)?.project_id;
        let lock = self.lock(&project_id);
        let _guard = lock.lock();
        fs::write(self.project_dir(&project_id).join(DETECTIONS_FILE), detector.to_json())?;
        Ok(())
    }

    fn transformer(&self, choice: TransformerChoice) -> ServiceResult<Box<dyn TransformerBackend>> {
        Ok(match choice {
            TransformerChoice::Rule => Box::new(RuleBackend),
            TransformerChoice::Llm => {
                let client: Arc<dyn CompletionClient> = match &self.llm_client {
                    Some(c) => c.clone(),
                    None => Arc::new(HttpCompletionClient::from_config(&self.config.llm).map_err(|e| {
                        ServiceError::new(StatusCode::SERVICE_UNAVAILABLE, "llm_unavailable", e)
                    })?),
                };
                Box::new(LlmBackend::new(client))
            }
        })
    }

    /// Parses, transforms and validates an intent, then stores the spec and its prompt plan.
    pub fn submit_intent(&self, key: &str, req: IntentRequest) -> ServiceResult<StrategyResponse> {
        let project_id = self.project(key)?.project_id;
        let lock = self.lock(&project_id);
        let _guard = lock.lock();
        let mut project = self.project(&project_id)?;
        if project.images.is_empty() {
            return Err(ServiceError::precondition("no_images", "upload images before submitting an intent"));
        }
        for r in &req.regions {
            if !project.images.iter().any(|i| i.image_id == r.image_id) {
                return Err(ServiceError::invalid("unknown_image", format!("region {} names unknown image {}", r.region_id, r.image_id))
                    .with_detail(json!({"region_id": r.region_id, "image_id": r.image_id})));
            }
        }
        let choice = req.backend.unwrap_or(self.config.transformer);
        let backend = self.transformer(choice)?;
        let input = parse_annotated_text(&req.text, req.regions.clone())?;
        let request = TransformRequest { input, structured: req.structured };
        let spec = transform_intent(&request, &*backend)?;
        let plan = recommend_prompts(&spec, &*backend)?;
        project.intent = Some(IntentRecord { text: req.text, regions: req.regions, backend: choice });
        project.spec = Some(spec.clone());
        project.prompt_plan = Some(plan.clone());
        project.dataset = None;
        self.save(&project)?;
        Ok(StrategyResponse { spec, prompt_plan: plan })
    }

    /// Replaces the stored spec after validation.
    pub fn update_spec(&self, key: &str, spec: IntentSpecification) -> ServiceResult<StrategyResponse> {
        let project_id = self.project(key)?.project_id;
        let lock = self.lock(&project_id);
        let _guard = lock.lock();
        let mut project = self.project(&project_id)?;
        let (text, regions, choice) = match &project.intent {
            Some(i) => (i.text.clone(), i.regions.clone(), i.backend),
            None => (String::new(), Vec::new(), self.config.transformer),
        };
        let input = parse_annotated_text(&text, regions)?;
        let spec = validate_against_input(spec, &input)?;
        let plan = recommend_prompts(&spec, &*self.transformer(choice)?)?;
        project.spec = Some(spec.clone());
        project.prompt_plan = Some(plan.clone());
        project.dataset = None;
        self.save(&project)?;
        Ok(StrategyResponse { spec, prompt_plan: plan })
    }

    pub fn spec(&self, key: &str) -> ServiceResult<StrategyResponse> {
        let project = self.project(key)?;
        match (project.spec, project.prompt_plan) {
            (Some(spec), Some(prompt_plan)) => Ok(StrategyResponse { spec, prompt_plan }),
            _ => Err(ServiceError::not_found("spec_missing", "no intent has been submitted")),
        }
    }

    fn dataset_root(&self, project_id: &str) -> PathBuf {
        self.project_dir(project_id).join("dataset")
    }

    /// Builds the processed dataset from the stored images and spec.
    pub fn preprocess(&self, key: &str, thresholds: Option<Thresholds>) -> ServiceResult<DatasetSummary> {
        let project_id = self.project(key)?.project_id;
        let lock = self.lock(&project_id);
        let _guard = lock.lock();
        let mut project = self.project(&project_id)?;
        let spec = project
            .spec
            .clone()
            .ok_or_else(|| ServiceError::precondition("spec_missing", "submit an intent before preprocessing"))?;
        let thresholds = thresholds.unwrap_or(self.config.thresholds);
        let regions = project.intent.as_ref().map(|i| i.regions.clone()).unwrap_or_default();
        let images = project
            .images
            .iter()
            .map(|rec| {
                let pixels = imaging::load_rgb(&self.image_path(&project_id, &rec.image_id))
                    .map_err(|e| ServiceError::internal(format!("{}: {e}", rec.image_id)))?;
                Ok(SourceImage::new(rec.image_id.clone(), pixels).named(rec.file_name.clone()))
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        let detections = self.project_dir(&project_id).join(DETECTIONS_FILE);
        let detector = if detections.exists() {
            FixtureDetector::load(&detections).map_err(ServiceError::internal)?
        } else {
            FixtureDetector::default()
        };
        let backends = AugmentBackends {
            detector: &detector,
            embedder: &HashEmbedder::default(),
            inpainter: &MeanFillInpainter,
            captioner: &PaletteCaptioner,
            rewriter: &RuleRewriter,
        };
        let root = self.dataset_root(&project_id);
        let report = build_dataset(&images, &regions, &spec, backends, &thresholds, &root)?;
        let summary = DatasetSummary {
            folders: report.dataset.folders().clone(),
            items: report.dataset.len(),
            failures: report.failures,
            warnings: report.warnings,
        };
        project.dataset = Some(summary.clone());
        self.save(&project)?;
        Ok(summary)
    }

    fn open_dataset(&self, project: &Project) -> ServiceResult<ProcessedDataset> {
        if project.dataset.is_none() {
            return Err(ServiceError::precondition("dataset_missing", "preprocess the project first"));
        }
        Ok(ProcessedDataset::open(&self.dataset_root(&project.project_id))?)
    }

    fn caption_view(project_id: &str, item: &intenttune_core::dataset::DatasetItem) -> CaptionView {
        CaptionView {
            relative_path: item.record.relative_path.clone(),
            folder: item.record.folder.clone(),
            source_image_id: item.record.source_image_id.clone(),
            image_url: format!("/api/projects/{project_id}/dataset/{}", item.record.relative_path),
            caption: item.caption.clone(),
        }
    }

    pub fn captions(&self, key: &str, folder: Option<&str>) -> ServiceResult<Vec<CaptionView>> {
        let project = self.project(key)?;
        let ds = self.open_dataset(&project)?;
        Ok(ds
            .items
            .iter()
            .filter(|i| folder.is_none_or(|f| i.record.folder == f))
            .map(|i| Self::caption_view(&project.project_id, i))
            .collect())
    }

    pub fn put_caption(&self, key: &str, relative_path: &str, text: &str) -> ServiceResult<CaptionView> {
        let project_id = self.project(key)?.project_id;
        let lock = self.lock(&project_id);
        let _guard = lock.lock();
        let project = self.project(&project_id)?;
        let mut ds = self.open_dataset(&project)?;
        ds.put_caption(relative_path, text)?;
        let item = ds.item(relative_path).expect("caption was just written");
        Ok(Self::caption_view(&project_id, item))
    }

    pub fn propagate(&self, key: &str, find: &str, replace: &str, folder: Option<String>) -> ServiceResult<usize> {
        let project_id = self.project(key)?.project_id;
        let lock = self.lock(&project_id);
        let _guard = lock.lock();
        let project = self.project(&project_id)?;
        let mut ds = self.open_dataset(&project)?;
        let scope = folder.map(EditScope::Folder).unwrap_or(EditScope::All);
        Ok(propagate_edit(&mut ds, find, replace, &scope)?)
    }

    pub fn dataset_file(&self, key: &str, relative: &str) -> ServiceResult<PathBuf> {
        let project = self.project(key)?;
        let path = self.dataset_root(&project.project_id).join(safe_relative(relative)?);
        if !path.is_file() {
            return Err(ServiceError::not_found("unknown_file", relative));
        }
        Ok(path)
    }

    /// Starts a training run on a snapshot of the project's dataset.
    pub fn train(&self, key: &str, overrides: ConfigOverrides) -> ServiceResult<RunView> {
        let project_id = self.project(key)?.project_id;
        let lock = self.lock(&project_id);
        let _guard = lock.lock();
        let mut project = self.project(&project_id)?;
        let ds = self.open_dataset(&project)?;
        let plan = project
            .prompt_plan
            .clone()
            .ok_or_else(|| ServiceError::precondition("spec_missing", "submit an intent first"))?;
        let config = TrainingConfig::resolve(ds.spec(), &overrides)?;
        let run_id = {
            let _g = self.registry_lock.lock();
            let n = self.orchestrator.list_runs().len();
            let run_id = (n + 1..).map(|i| format!("run-{i:04}")).find(|id| {
                self.orchestrator.run_status(id).is_err() && !self.orchestrator.runs_dir().join(id).exists()
            });
            let run_id = run_id.expect("unbounded id range");
            fs::create_dir_all(self.orchestrator.runs_dir())?;
            fs::write(self.orchestrator.runs_dir().join(format!("{run_id}.project")), &project_id)?;
            run_id
        };
        let state = self.orchestrator.start_run(&run_id, ds, config, plan)?;
        project.runs.push(run_id);
        self.save(&project)?;
        Ok(self.run_view(&project_id, state))
    }

    fn run_project(&self, run_id: &str) -> String {
        fs::read_to_string(self.orchestrator.runs_dir().join(format!("{run_id}.project"))).unwrap_or_default()
    }

    fn run_view(&self, project_id: &str, state: RunState) -> RunView {
        RunView { project_id: project_id.to_string(), files_url: format!("/api/runs/{}/files/", state.run_id), state }
    }

    pub fn run_status(&self, run_id: &str) -> ServiceResult<RunView> {
        let state = self.orchestrator.run_status(run_id)?;
        Ok(self.run_view(&self.run_project(run_id), state))
    }

    pub fn stop(&self, run_id: &str) -> ServiceResult<RunView> {
        let state = self.orchestrator.stop_run(run_id)?;
        Ok(self.run_view(&self.run_project(run_id), state))
    }

    pub fn wait(&self, run_id: &str, timeout: Duration) -> ServiceResult<RunView> {
        let state = self.orchestrator.wait(run_id, timeout)?;
        Ok(self.run_view(&self.run_project(run_id), state))
    }

    pub fn events(&self, run_id: &str, after: u64, timeout: Duration) -> ServiceResult<EventsView> {
        let (events, done) = self.orchestrator.events_since(run_id, after, timeout)?;
        Ok(EventsView { run_id: run_id.to_string(), files_url: format!("/api/runs/{run_id}/files/"), events, done })
    }

    pub fn run_file(&self, run_id: &str, relative: &str) -> ServiceResult<PathBuf> {
        let path = self.orchestrator.resolve(run_id, &safe_relative(relative)?)?;
        if !path.is_file() {
            return Err(ServiceError::not_found("unknown_file", relative));
        }
        Ok(path)
    }

    /// Checkpoints of every run in the project, oldest first.
    pub fn list_models(&self, key: &str) -> ServiceResult<Vec<ModelView>> {
        let project = self.project(key)?;
        let mut out = Vec::new();
        for run_id in &project.runs {
            let state = self.orchestrator.run_status(run_id)?;
            for c in state.checkpoints {
                out.push(ModelView {
                    cover_url: c
                        .cover_image
                        .as_ref()
                        .map(|p| format!("/api/runs/{run_id}/files/{}", p.to_string_lossy())),
                    checkpoint_id: c.checkpoint_id,
                    run_id: c.run_id,
                    step: c.step,
                    intent_scores: scores(&c.intent_scores),
                });
            }
        }
        Ok(out)
    }

    /// Scores a checkpoint and stores the generated samples under the run's `evaluations/`.
    pub fn evaluate(&self, checkpoint_id: &str, req: EvaluateRequest) -> ServiceResult<EvaluationView> {
        if let Some(0) = req.samples {
            return Err(ServiceError::invalid("invalid_samples", "samples must be at least 1"));
        }
        let eval = self.orchestrator.evaluate_checkpoint(checkpoint_id, req.prompt.as_deref(), req.metrics, req.samples)?;
        let (state, _) = self.orchestrator.checkpoint(checkpoint_id)?;
        let run_id = state.run_id;
        let mut samples = Vec::new();
        for batch in &eval.batches {
            let hash = &imaging::sha256_hex(batch.prompt.as_bytes())[..12];
            let rel = PathBuf::from("evaluations").join(checkpoint_id).join(hash);
            let dir = self.orchestrator.resolve(&run_id, &rel)?;
            fs::create_dir_all(&dir)?;
            let mut urls = Vec::new();
            for (i, img) in batch.images.iter().enumerate() {
                fs::write(dir.join(format!("{i}.png")), imaging::encode_png(img))?;
                urls.push(format!("/api/runs/{run_id}/files/{}/{i}.png", rel.to_string_lossy()));
            }
            samples.push(SampleView { prompt: batch.prompt.clone(), image_urls: urls });
        }
        Ok(EvaluationView {
            checkpoint_id: eval.checkpoint_id,
            step: eval.step,
            scores: scores(&eval.scores),
            failures: eval.failures.into_iter().map(|(metric, reason)| FailureView { metric, reason }).collect(),
            samples,
        })
    }

    /// PNG bytes of one generated image.
    pub fn generate(&self, checkpoint_id: &str, prompt: &str, seed: u64) -> ServiceResult<Vec<u8>> {
        if prompt.trim().is_empty() {
            return Err(ServiceError::invalid("empty_prompt", "prompt must be non-empty"));
        }
        let img = self.orchestrator.generate(checkpoint_id, prompt, seed)?;
        Ok(imaging::encode_png(&img))
    }
}
