//! Chat-completion backends.
//!
//! [`RemoteBackend`] talks to an OpenAI-compatible HTTP endpoint;
//! [`ScriptedBackend`] answers from a fixed script and never touches the
//! network.

mod remote;
mod scripted;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{RemoteBackend, RemoteConfig, API_KEY_ENV};
pub use scripted::{load_script, Matcher, ScriptEntry, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Id of the template the prompt was built from. Used for script
    /// matching; never sent over the wire.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_tokens: 1024,
            template_id: None,
        }
    }
}

impl CompletionParams {
    pub fn for_template(&self, template_id: &str) -> Self {
        Self {
            template_id: Some(template_id.to_string()),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("token limit exceeded: {0}")]
    TokenLimitExceeded(String),
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Unavailable(_) => "backend-unavailable",
            BackendError::Auth(_) => "auth-error",
            BackendError::TokenLimitExceeded(_) => "token-limit-exceeded",
            BackendError::Timeout(_) => "timeout",
            BackendError::InvalidRequest(_) => "invalid-request",
        }
    }
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    /// Returns the completion text for `messages` verbatim.
    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError>;
}

pub(crate) fn check_request(
    messages: &[ChatMessage],
    params: &CompletionParams,
) -> Result<(), BackendError> {
    match messages.last() {
        None => return Err(BackendError::InvalidRequest("no messages".into())),
        Some(m) if m.role != Role::User => {
            return Err(BackendError::InvalidRequest("last message must come from the user".into()))
        }
        _ => {}
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != Role::System && m.content.is_empty())
    {
        return Err(BackendError::InvalidRequest(format!(
            "empty {:?} message",
            m.role
        )));
    }
    // NaN fails too
    if params.temperature.is_nan() || params.temperature < 0.0 {
        return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
    }
    if params.max_tokens == 0 {
        return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_checks() {
        let p = CompletionParams::default();
        assert!(check_request(&[], &p).is_err());
        assert!(check_request(&[ChatMessage::system("s")], &p).is_err());
        assert!(check_request(&[ChatMessage::user("")], &p).is_err());
        assert!(check_request(&[ChatMessage::system(""), ChatMessage::user("q")], &p).is_ok());
        let hot = CompletionParams {
            temperature: -1.0,
            ..p.clone()
        };
        assert!(check_request(&[ChatMessage::user("q")], &hot).is_err());
    }
}
