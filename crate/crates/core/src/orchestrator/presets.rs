//! Per-domain LoRA hyperparameters and the training configuration.

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::intent::{Domain, IntentSpecification};

pub const OPTIMIZER_LABEL: &str = "8-bit AdamW";
pub const SCHEDULER_LABEL: &str = "cosine annealing with warm restarts";

pub const DEFAULT_BATCH_SIZE: u32 = 4;
pub const DEFAULT_EPOCHS: u32 = 10;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterPreset {
    pub unet_lr: f64,
    pub text_encoder_lr: f64,
    pub lora_dimension: u32,
    pub lora_alpha: u32,
    pub optimizer_name: String,
    pub lr_scheduler_name: String,
}

/// Default LoRA settings for a training domain.
///
/// | domain         | U-Net LR | text encoder LR | dim | alpha |
/// |----------------|----------|-----------------|-----|-------|
/// | painting       | 1e-4     | 1e-5            | 64  | 32    |
/// | human portrait | 1e-4     | 5e-5            | 128 | 64    |
/// | 2D character   | 1e-4     | 1e-5            | 32  | 32    |
/// | product        | 1e-4     | 5e-5            | 64  | 32    |
pub fn preset_hyperparameters(domain: Domain) -> Result<HyperparameterPreset, OrchestratorError> {
    let (unet_lr, text_encoder_lr, lora_dimension, lora_alpha) = match domain {
        Domain::Painting => (1e-4, 1e-5, 64, 32),
        Domain::HumanPortrait => (1e-4, 5e-5, 128, 64),
        Domain::Character2d => (1e-4, 1e-5, 32, 32),
        Domain::Product => (1e-4, 5e-5, 64, 32),
        Domain::Other => return Err(OrchestratorError::UnknownDomain(domain)),
    };
    Ok(HyperparameterPreset {
        unet_lr,
        text_encoder_lr,
        lora_dimension,
        lora_alpha,
        optimizer_name: OPTIMIZER_LABEL.into(),
        lr_scheduler_name: SCHEDULER_LABEL.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub base_model_id: String,
    pub trigger_word: String,
    pub domain: Domain,
    pub unet_lr: f64,
    pub text_encoder_lr: f64,
    pub lora_dimension: u32,
    pub lora_alpha: u32,
    pub optimizer_name: String,
    pub lr_scheduler_name: String,
    pub batch_size: u32,
    pub epochs: u32,
    /// Sampling cadence in steps; 0 samples at every checkpoint.
    pub sample_every_steps: u64,
    pub seed: u64,
}

/// User-supplied replacements for any configuration field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub base_model_id: Option<String>,
    pub unet_lr: Option<f64>,
    pub text_encoder_lr: Option<f64>,
    pub lora_dimension: Option<u32>,
    pub lora_alpha: Option<u32>,
    pub optimizer_name: Option<String>,
    pub lr_scheduler_name: Option<String>,
    pub batch_size: Option<u32>,
    pub epochs: Option<u32>,
    pub sample_every_steps: Option<u64>,
    pub seed: Option<u64>,
}

pub const DEFAULT_BASE_MODEL: &str = "stable-diffusion-v1-5";

impl TrainingConfig {
    /// Preset for the spec's domain with `overrides` applied. Domain `other`
    /// needs both learning rates, the dimension and alpha in `overrides`.
    pub fn resolve(spec: &IntentSpecification, overrides: &ConfigOverrides) -> Result<Self, OrchestratorError> {
        let preset = match preset_hyperparameters(spec.domain) {
            Ok(p) => p,
            Err(e) => match (overrides.unet_lr, overrides.text_encoder_lr, overrides.lora_dimension, overrides.lora_alpha)
            {
                (Some(unet_lr), Some(text_encoder_lr), Some(lora_dimension), Some(lora_alpha)) => HyperparameterPreset {
                    unet_lr,
                    text_encoder_lr,
                    lora_dimension,
                    lora_alpha,
                    optimizer_name: OPTIMIZER_LABEL.into(),
                    lr_scheduler_name: SCHEDULER_LABEL.into(),
                },
                _ => return Err(e),
            },
        };
        let o = overrides.clone();
        let cfg = TrainingConfig {
            base_model_id: o.base_model_id.unwrap_or_else(|| DEFAULT_BASE_MODEL.into()),
            trigger_word: spec.trigger_word.clone(),
            domain: spec.domain,
            unet_lr: o.unet_lr.unwrap_or(preset.unet_lr),
            text_encoder_lr: o.text_encoder_lr.unwrap_or(preset.text_encoder_lr),
            lora_dimension: o.lora_dimension.unwrap_or(preset.lora_dimension),
            lora_alpha: o.lora_alpha.unwrap_or(preset.lora_alpha),
            optimizer_name: o.optimizer_name.unwrap_or(preset.optimizer_name),
            lr_scheduler_name: o.lr_scheduler_name.unwrap_or(preset.lr_scheduler_name),
            batch_size: o.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            epochs: o.epochs.unwrap_or(DEFAULT_EPOCHS),
            sample_every_steps: o.sample_every_steps.unwrap_or(0),
            seed: o.seed.unwrap_or(DEFAULT_SEED),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |why: &str| Err(OrchestratorError::InvalidConfig(why.to_string()));
        if !(self.unet_lr > 0.0 && self.text_encoder_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.lora_dimension == 0 || self.lora_alpha == 0 {
            return bad("lora dimension and alpha must be positive");
        }
        if self.trigger_word.trim().is_empty() || self.base_model_id.trim().is_empty() {
            return bad("trigger word and base model are required");
        }
        Ok(())
    }
}
