//! Chat-completions client for the language-model intent backend.

use intenttune_core::transformer::CompletionClient;
use serde_json::{json, Value};

use crate::config::LlmConfig;

/// Blocking client for an OpenAI-style `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpCompletionClient {
    http: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpCompletionClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>, timeout: std::time::Duration) -> Result<Self, String> {
        let http = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| e.to_string())?;
        Ok(Self { http, url: url.into(), model: model.into(), api_key })
    }

    pub fn from_config(cfg: &LlmConfig) -> Result<Self, String> {
        let url = cfg
            .resolved_url()
            .ok_or_else(|| format!("no language model endpoint configured; set {}", crate::config::ENV_LLM_URL))?;
        Self::new(url, cfg.resolved_model(), cfg.api_key(), cfg.timeout())
    }
}

impl CompletionClient for HttpCompletionClient {
    fn complete(&self, prompt: &str) -> Result<String, String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| format!("request to {}: {e}", self.url))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("{} returned {status}: {}", self.url, text.chars().take(300).collect::<String>()));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| format!("reply is not JSON: {e}"))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| "reply has no choices[0].message.content".to_string())
    }
}
