//! Engine configuration: a TOML file with `ONTO_*` environment overrides.

use std::path::{Path, PathBuf};

use ontoprompt_core::dialogue::{PipelineConfig, PreprocessRules};
use ontoprompt_core::llm_backend::{CompletionParams, RemoteConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Chat-completions endpoint, for the remote backend.
    pub url: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    /// Script document, for the scripted backend.
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let params = CompletionParams::default();
        let remote = RemoteConfig::new("");
        Self {
            kind: BackendKind::Scripted,
            url: None,
            model: params.model,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            retries: remote.retries,
            backoff_ms: remote.backoff_ms,
            timeout_ms: remote.timeout_ms,
            script: Some("fixtures/script.json".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub bind: String,
    pub meta: PathBuf,
    pub contexts: PathBuf,
    /// NDJSON log of tuning sessions; in memory when unset.
    pub sessions_log: Option<PathBuf>,
    /// NDJSON judgments file; in memory when unset.
    pub judgments_log: Option<PathBuf>,
    pub top_k: usize,
    pub intent_floor: f64,
    pub max_intents: usize,
    pub backend: BackendConfig,
    pub preprocess: PreprocessRules,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        Self {
            bind: "127.0.0.1:8080".into(),
            meta: "fixtures/meta.json".into(),
            contexts: "fixtures/ctx.json".into(),
            sessions_log: None,
            judgments_log: None,
            top_k: pipeline.top_k,
            intent_floor: pipeline.intent_floor,
            max_intents: pipeline.max_intents,
            backend: BackendConfig::default(),
            preprocess: pipeline.preprocess,
        }
    }
}

fn parsed<T: std::str::FromStr>(key: &str, raw: String) -> Result<T, ConfigError> {
    raw.parse()
        .map_err(|_| ConfigError::Invalid(format!("{key}={raw:?} does not parse")))
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Reads `path` (defaults when `None`), then applies process environment
    /// overrides and checks the result.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        config.validate()?;
        Ok(config)
    }

    /// Applies `ONTO_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = var("ONTO_BIND") {
            self.bind = v;
        }
        if let Some(v) = var("ONTO_META") {
            self.meta = v.into();
        }
        if let Some(v) = var("ONTO_CONTEXTS") {
            self.contexts = v.into();
        }
        if let Some(v) = var("ONTO_SESSIONS_LOG") {
            self.sessions_log = Some(v.into());
        }
        if let Some(v) = var("ONTO_JUDGMENTS_LOG") {
            self.judgments_log = Some(v.into());
        }
        if let Some(v) = var("ONTO_TOP_K") {
            self.top_k = parsed("ONTO_TOP_K", v)?;
        }
        if let Some(v) = var("ONTO_INTENT_FLOOR") {
            self.intent_floor = parsed("ONTO_INTENT_FLOOR", v)?;
        }
        if let Some(v) = var("ONTO_MAX_INTENTS") {
            self.max_intents = parsed("ONTO_MAX_INTENTS", v)?;
        }
        if let Some(v) = var("ONTO_BACKEND") {
            self.backend.kind = match v.as_str() {
                "remote" => BackendKind::Remote,
                "scripted" => BackendKind::Scripted,
                _ => return Err(ConfigError::Invalid(format!("ONTO_BACKEND={v:?}: expected remote or scripted"))),
            };
        }
        if let Some(v) = var("ONTO_BACKEND_URL") {
            self.backend.url = Some(v);
        }
        if let Some(v) = var("ONTO_BACKEND_MODEL") {
            self.backend.model = v;
        }
        if let Some(v) = var("ONTO_BACKEND_TEMPERATURE") {
            self.backend.temperature = parsed("ONTO_BACKEND_TEMPERATURE", v)?;
        }
        if let Some(v) = var("ONTO_SCRIPT") {
            self.backend.script = Some(v.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.top_k < 1 {
            return bad("top_k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.intent_floor) {
            return bad("intent_floor must lie in [0, 1]");
        }
        if self.max_intents < 1 {
            return bad("max_intents must be at least 1");
        }
        if self.backend.temperature < 0.0 {
            return bad("backend.temperature must be non-negative");
        }
        match self.backend.kind {
            BackendKind::Remote if self.backend.url.as_deref().unwrap_or("").is_empty() => {
                bad("remote backend needs backend.url")
            }
            BackendKind::Scripted if self.backend.script.is_none() => {
                bad("scripted backend needs backend.script")
            }
            _ => Ok(()),
        }
    }

    pub fn completion(&self) -> CompletionParams {
        CompletionParams {
            model: self.backend.model.clone(),
            temperature: self.backend.temperature,
            max_tokens: self.backend.max_tokens,
            template_id: None,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            preprocess: self.preprocess.clone(),
            intent_floor: self.intent_floor,
            max_intents: self.max_intents,
            top_k: self.top_k,
            completion: self.completion(),
            ..PipelineConfig::default()
        }
    }

    pub fn remote(&self) -> RemoteConfig {
        RemoteConfig {
            retries: self.backend.retries,
            backoff_ms: self.backend.backoff_ms,
            timeout_ms: self.backend.timeout_ms,
            ..RemoteConfig::new(self.backend.url.clone().unwrap_or_default())
        }
    }
}
