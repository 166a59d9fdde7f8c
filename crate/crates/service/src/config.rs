//! Service configuration, read from a TOML or JSON file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use intenttune_core::augment::Thresholds;
use serde::{Deserialize, Serialize};

pub const ENV_LLM_URL: &str = "INTENTTUNE_LLM_URL";
pub const ENV_LLM_MODEL: &str = "INTENTTUNE_LLM_MODEL";
pub const ENV_LLM_API_KEY: &str = "INTENTTUNE_LLM_API_KEY";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransformerChoice {
    #[default]
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Chat-completions endpoint. Overridden by `INTENTTUNE_LLM_URL`.
    pub url: Option<String>,
    /// Overridden by `INTENTTUNE_LLM_MODEL`.
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self { url: None, model: "gpt-4o-mini".into(), api_key_env: ENV_LLM_API_KEY.into(), timeout_secs: 120 }
    }
}

impl LlmConfig {
    pub fn resolved_url(&self) -> Option<String> {
        std::env::var(ENV_LLM_URL).ok().filter(|s| !s.is_empty()).or_else(|| self.url.clone())
    }

    pub fn resolved_model(&self) -> String {
        std::env::var(ENV_LLM_MODEL).ok().filter(|s| !s.is_empty()).unwrap_or_else(|| self.model.clone())
    }

    pub fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok().filter(|s| !s.is_empty())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs.max(1))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Artificial pause per epoch for the mock trainer, to watch a run live.
    pub epoch_delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub workspace: PathBuf,
    pub bind: String,
    pub transformer: TransformerChoice,
    pub llm: LlmConfig,
    pub thresholds: Thresholds,
    pub trainer: TrainerConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("intenttune-workspace"),
            bind: "127.0.0.1:8080".into(),
            transformer: TransformerChoice::Rule,
            llm: LlmConfig::default(),
            thresholds: Thresholds::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// `.json` files are parsed as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
        } else {
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
        }
    }
}
