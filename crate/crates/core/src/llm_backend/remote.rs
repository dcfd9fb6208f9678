use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_request, BackendError, ChatMessage, CompletionParams, LlmBackend};

pub const API_KEY_ENV: &str = "ONTO_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Bearer token; read from `ONTO_LLM_API_KEY` when not set.
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_ms: default_timeout_ms(),
            api_key: None,
        }
    }
}

/// OpenAI-compatible chat-completion client.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::Client,
}

enum Attempt {
    Retry(BackendError),
    Fail(BackendError),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let api_key = config
            .api_key
            .clone()
            .or_else(|| std::env::var(API_KEY_ENV).ok())
            .filter(|k| !k.is_empty());
        Self {
            config,
            api_key,
            client: reqwest::Client::new(),
        }
    }

    /// Request body sent for `messages`; prompt text is embedded unchanged.
    pub fn request_body(messages: &[ChatMessage], params: &CompletionParams) -> Value {
        json!({
            "model": params.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        })
    }

    async fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        let mut req = self.client.post(&self.config.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let sent = tokio::time::timeout(timeout, async {
            let resp = req.send().await?;
            let status = resp.status();
            let text = resp.text().await?;
            Ok::<_, reqwest::Error>((status, text))
        })
        .await;

        let (status, text) = match sent {
            Err(_) => return Err(Attempt::Retry(BackendError::Timeout(self.config.timeout_ms))),
            Ok(Err(e)) => return Err(Attempt::Retry(BackendError::Unavailable(e.to_string()))),
            Ok(Ok(pair)) => pair,
        };

        let code = status.as_u16();
        if status.is_success() {
            return extract_content(&text).ok_or_else(|| {
                Attempt::Fail(BackendError::Unavailable(
                    "response has no choices[0].message.content".into(),
                ))
            });
        }
        let detail = format!("HTTP {code}: {}", truncate(&text, 200));
        match code {
            401 | 403 => Err(Attempt::Fail(BackendError::Auth(detail))),
            413 => Err(Attempt::Fail(BackendError::TokenLimitExceeded(detail))),
            400 if is_token_limit(&text) => Err(Attempt::Fail(BackendError::TokenLimitExceeded(detail))),
            408 | 429 | 500..=599 => Err(Attempt::Retry(BackendError::Unavailable(detail))),
            _ => Err(Attempt::Fail(BackendError::Unavailable(detail))),
        }
    }
}

fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?
        .as_str()
        .map(str::to_string)
}

fn is_token_limit(body: &str) -> bool {
    body.contains("context_length_exceeded") || body.contains("maximum context length")
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[async_trait]
impl LlmBackend for RemoteBackend {
    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        check_request(messages, params)?;
        let body = Self::request_body(messages, params);
        let mut attempt = 0;
        loop {
            match self.attempt(&body).await {
                Ok(text) => return Ok(text),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= self.config.retries => return Err(e),
                Err(Attempt::Retry(_)) => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                    attempt += 1;
                }
            }
        }
    }
}
