//! Trainer interface and a deterministic stand-in trainer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::presets::TrainingConfig;
use crate::dataset::{ProcessedDataset, BASE_FOLDER};
use crate::imaging;

pub const ADAPTER_FILE: &str = "adapter.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerEvent {
    StepCompleted { step: u64 },
    CheckpointSaved { path: PathBuf, step: u64 },
    Finished,
    Failed { reason: String },
}

/// Set by the orchestrator to ask a trainer to stop after the current step.
#[derive(Debug, Clone, Default)]
pub struct StopFlag(Arc<AtomicBool>);

impl StopFlag {
    pub fn raise(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_raised(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

pub struct TrainingJob {
    pub dataset: ProcessedDataset,
    pub config: TrainingConfig,
    /// Checkpoints go under `<output_dir>/checkpoints/<step>/`.
    pub output_dir: PathBuf,
}

pub trait TrainerBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Starts training on a background thread. Events arrive in order on
    /// `events`; the thread exits once `stop` is raised or training ends.
    fn start(&self, job: TrainingJob, events: Sender<TrainerEvent>, stop: StopFlag) -> Result<JoinHandle<()>, String>;
    /// Renders one image from a saved checkpoint.
    fn generate(&self, checkpoint: &Path, prompt: &str, seed: u64) -> Result<RgbImage, String>;
}

/// Checkpoint payload written by [`MockTrainer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MockAdapter {
    step: u64,
    total_steps: u64,
    trigger_word: String,
    /// Folder name → mean colour of each of its images.
    palettes: BTreeMap<String, Vec<[u8; 3]>>,
}

/// Trainer that "learns" the mean colours of the dataset.
///
/// Each epoch ends in a checkpoint. Generated images blend seeded noise
/// toward a colour drawn from the folder the prompt names, weighted by
/// training progress, so samples drift from noise toward the data as the
/// run advances. Output is a pure function of (checkpoint, prompt, seed).
#[derive(Debug, Clone)]
pub struct MockTrainer {
    pub epoch_delay: Duration,
    pub image_side: u32,
}

impl Default for MockTrainer {
    fn default() -> Self {
        Self { epoch_delay: Duration::ZERO, image_side: 64 }
    }
}

impl MockTrainer {
    pub fn with_epoch_delay(mut self, delay: Duration) -> Self {
        self.epoch_delay = delay;
        self
    }
}

fn palettes(dataset: &ProcessedDataset) -> Result<BTreeMap<String, Vec<[u8; 3]>>, String> {
    let mut out: BTreeMap<String, Vec<[u8; 3]>> = BTreeMap::new();
    for item in &dataset.items {
        let img = dataset.load_image(item).map_err(|e| e.to_string())?;
        let mean = imaging::mean_color(&img).map(|c| c.round() as u8);
        out.entry(item.record.folder.clone()).or_default().push(mean);
    }
    Ok(out)
}

/// Longest folder name mentioned in the prompt body, else the base folder.
fn folder_for_prompt<'a>(adapter: &'a MockAdapter, prompt: &str) -> Option<&'a Vec<[u8; 3]>> {
    let lower = prompt.to_lowercase();
    let body = lower.strip_prefix(&adapter.trigger_word.to_lowercase()).unwrap_or(&lower);
    adapter
        .palettes
        .iter()
        .filter(|(name, _)| name.as_str() != BASE_FOLDER && body.contains(&name.to_lowercase()))
        .max_by_key(|(name, _)| name.len())
        .map(|(_, p)| p)
        .or_else(|| adapter.palettes.get(BASE_FOLDER))
}

impl TrainerBackend for MockTrainer {
    fn name(&self) -> &str {
        "mock-trainer"
    }

    fn start(&self, job: TrainingJob, events: Sender<TrainerEvent>, stop: StopFlag) -> Result<JoinHandle<()>, String> {
        if job.dataset.is_empty() {
            return Err("dataset is empty".into());
        }
        let palettes = palettes(&job.dataset)?;
        let steps_per_epoch = (job.dataset.len() as u64).div_ceil(job.config.batch_size as u64);
        let total_steps = steps_per_epoch * job.config.epochs as u64;
        let delay = self.epoch_delay;
        let trigger_word = job.config.trigger_word.clone();
        let dir = job.output_dir.join("checkpoints");
        std::thread::Builder::new()
            .name("mock-trainer".into())
            .spawn(move || {
                let mut step = 0;
                for _ in 0..job.config.epochs {
                    if stop.is_raised() {
                        return;
                    }
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    for _ in 0..steps_per_epoch {
                        step += 1;
                        if events.send(TrainerEvent::StepCompleted { step }).is_err() {
                            return;
                        }
                    }
                    let adapter = MockAdapter {
                        step,
                        total_steps,
                        trigger_word: trigger_word.clone(),
                        palettes: palettes.clone(),
                    };
                    let path = dir.join(step.to_string());
                    let written = std::fs::create_dir_all(&path)
                        .and_then(|_| std::fs::write(path.join(ADAPTER_FILE), serde_json::to_vec_pretty(&adapter)?));
                    let event = match written {
                        Ok(()) => TrainerEvent::CheckpointSaved { path, step },
                        Err(e) => TrainerEvent::Failed { reason: format!("writing checkpoint {step}: {e}") },
                    };
                    let failed = matches!(event, TrainerEvent::Failed { .. });
                    if events.send(event).is_err() || failed {
                        return;
                    }
                }
                if !stop.is_raised() {
                    let _ = events.send(TrainerEvent::Finished);
                }
            })
            .map_err(|e| e.to_string())
    }

    fn generate(&self, checkpoint: &Path, prompt: &str, seed: u64) -> Result<RgbImage, String> {
        let file = checkpoint.join(ADAPTER_FILE);
        let bytes = std::fs::read(&file).map_err(|e| format!("{}: {e}", file.display()))?;
        let adapter: MockAdapter = serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", file.display()))?;
        let progress = adapter.step as f64 / adapter.total_steps.max(1) as f64;
        let key = format!("{}|{}|{}", adapter.step, prompt, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(imaging::seed_from(key.as_bytes()));
        let palette = folder_for_prompt(&adapter, prompt).filter(|p| !p.is_empty());
        let target = match palette {
            Some(p) => p[rng.random_range(0..p.len())],
            None => [128, 128, 128],
        };
        let side = self.image_side.max(1);
        let mut img = RgbImage::new(side, side);
        for p in img.pixels_mut() {
            let noise: [u8; 3] = rng.random();
            *p = Rgb(std::array::from_fn(|c| {
                (noise[c] as f64 * (1.0 - progress) + target[c] as f64 * progress).round() as u8
            }));
        }
        Ok(img)
    }
}
