//! Tuning sessions: a knowledge engineer iterates a prompt against the
//! backend, then folds the final template into a new ontology snapshot.
//!
//! Every event is appended to an optional NDJSON log
//! (`{session_id, event, payload, timestamp}`) and [`TuningRegistry::open`]
//! replays it, so history survives restarts.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Mutex as SessionLock;

use crate::llm_backend::{BackendError, ChatMessage, CompletionParams, LlmBackend};
use crate::meta_ontology::{
    validate_meta_ontology, Diagnostic, MetaOntology, PromptTemplate, Severity,
};
use crate::prompt_engine::{render, StructuredPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    Drafting,
    Iterating,
    Finalized,
    Abandoned,
}

impl SessionStatus {
    pub fn is_open(self) -> bool {
        matches!(self, SessionStatus::Drafting | SessionStatus::Iterating)
    }
}

/// What the engineer sent: an instantiated prompt or free draft text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IterationPrompt {
    Draft(String),
    Structured(StructuredPrompt),
}

impl IterationPrompt {
    pub fn render(&self) -> String {
        match self {
            IterationPrompt::Draft(s) => s.clone(),
            IterationPrompt::Structured(p) => render(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningIteration {
    pub prompt: IterationPrompt,
    pub response: String,
    #[serde(default)]
    pub engineer_notes: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSession {
    pub id: String,
    pub purpose: String,
    pub status: SessionStatus,
    pub iterations: Vec<TuningIteration>,
    pub finalized_template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuningError {
    #[error("purpose must be non-empty")]
    EmptyPurpose,
    #[error("no tuning session {0:?}")]
    NotFound(String),
    #[error("session {id} is {status:?}")]
    SessionClosed { id: String, status: SessionStatus },
    #[error("session {0} has no iterations to finalize")]
    NoIterations(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("template rejected: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<Diagnostic>),
    #[error("session log: {0}")]
    Log(String),
}

impl TuningError {
    pub fn code(&self) -> &'static str {
        match self {
            TuningError::EmptyPurpose => "precondition",
            TuningError::NotFound(_) => "not-found",
            TuningError::SessionClosed { .. } => "session-closed",
            TuningError::NoIterations(_) => "precondition",
            TuningError::Backend(e) => e.code(),
            TuningError::ValidationFailed(_) => "validation-failed",
            TuningError::Log(_) => "log-error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub session_id: String,
    pub event: String,
    pub payload: Value,
    pub timestamp: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// All tuning sessions. Each session has its own lock, held for the whole of
/// a submission, so one session sees one writer while others proceed.
#[derive(Default)]
pub struct TuningRegistry {
    sessions: Mutex<BTreeMap<String, Arc<SessionLock<TuningSession>>>>,
    next_id: AtomicU64,
    log: Option<Mutex<PathBuf>>,
}

impl TuningRegistry {
    pub fn in_memory() -> Self {
        Self {
            next_id: AtomicU64::new(1),
            ..Self::default()
        }
    }

    /// Opens a session log, replaying any events it already holds.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, TuningError> {
        let path = path.as_ref().to_path_buf();
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(TuningError::Log(e.to_string())),
        };
        let mut sessions: BTreeMap<String, TuningSession> = BTreeMap::new();
        let mut max_id = 0;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: LogRecord = serde_json::from_str(line)
                .map_err(|e| TuningError::Log(format!("line {}: {e}", i + 1)))?;
            replay(&mut sessions, rec).map_err(|m| TuningError::Log(format!("line {}: {m}", i + 1)))?;
        }
        for id in sessions.keys() {
            if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
        }
        Ok(Self {
            sessions: Mutex::new(
                sessions
                    .into_iter()
                    .map(|(k, s)| (k, Arc::new(SessionLock::new(s))))
                    .collect(),
            ),
            next_id: AtomicU64::new(max_id + 1),
            log: Some(Mutex::new(path)),
        })
    }

    fn append(&self, session_id: &str, event: &str, payload: Value, timestamp: u64) -> Result<(), TuningError> {
        let Some(log) = &self.log else { return Ok(()) };
        let path = log.lock().unwrap();
        let rec = LogRecord {
            session_id: session_id.to_string(),
            event: event.to_string(),
            payload,
            timestamp,
        };
        let mut line = serde_json::to_string(&rec).expect("log records serialize");
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&*path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| TuningError::Log(e.to_string()))
    }

    fn handle(&self, id: &str) -> Result<Arc<SessionLock<TuningSession>>, TuningError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| TuningError::NotFound(id.to_string()))
    }

    pub fn start_session(&self, purpose: &str) -> Result<TuningSession, TuningError> {
        let purpose = purpose.trim();
        if purpose.is_empty() {
            return Err(TuningError::EmptyPurpose);
        }
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let session = TuningSession {
            id: id.clone(),
            purpose: purpose.to_string(),
            status: SessionStatus::Drafting,
            iterations: Vec::new(),
            finalized_template: None,
        };
        self.append(&id, "started", json!({ "purpose": purpose }), now_ms())?;
        self.sessions
            .lock()
            .unwrap()
            .insert(id, Arc::new(SessionLock::new(session.clone())));
        Ok(session)
    }

    /// Sends the rendered prompt to `backend` and records the exchange.
    pub async fn submit_iteration(
        &self,
        id: &str,
        prompt: IterationPrompt,
        notes: &str,
        backend: &dyn LlmBackend,
        params: &CompletionParams,
    ) -> Result<TuningIteration, TuningError> {
        let handle = self.handle(id)?;
        let mut session = handle.lock().await;
        if !session.status.is_open() {
            return Err(TuningError::SessionClosed {
                id: id.to_string(),
                status: session.status,
            });
        }
        let params = match &prompt {
            IterationPrompt::Structured(p) => params.for_template(&p.template_id),
            IterationPrompt::Draft(_) => params.clone(),
        };
        let response = backend
            .complete(&[ChatMessage::user(prompt.render())], &params)
            .await?;
        let iteration = TuningIteration {
            prompt,
            response,
            engineer_notes: notes.to_string(),
            timestamp: now_ms(),
        };
        self.append(id, "iteration", to_value(&iteration), iteration.timestamp)?;
        session.iterations.push(iteration.clone());
        session.status = SessionStatus::Iterating;
        Ok(iteration)
    }

    /// Returns a new snapshot holding `template`; `onto` itself is untouched.
    pub async fn finalize_session(
        &self,
        id: &str,
        template: PromptTemplate,
        onto: &MetaOntology,
    ) -> Result<MetaOntology, TuningError> {
        let handle = self.handle(id)?;
        let mut session = handle.lock().await;
        match session.status {
            SessionStatus::Iterating => {}
            SessionStatus::Drafting => return Err(TuningError::NoIterations(id.to_string())),
            status => {
                return Err(TuningError::SessionClosed {
                    id: id.to_string(),
                    status,
                })
            }
        }
        let template_id = template.id.clone();
        let candidate = onto.with_template(template.clone());
        let errors: Vec<_> = validate_meta_ontology(&candidate)
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .collect();
        if !errors.is_empty() {
            return Err(TuningError::ValidationFailed(errors));
        }
        self.append(id, "finalized", json!({ "template": template }), now_ms())?;
        session.status = SessionStatus::Finalized;
        session.finalized_template = Some(template_id);
        Ok(candidate)
    }

    pub async fn abandon_session(&self, id: &str) -> Result<TuningSession, TuningError> {
        let handle = self.handle(id)?;
        let mut session = handle.lock().await;
        if !session.status.is_open() {
            return Err(TuningError::SessionClosed {
                id: id.to_string(),
                status: session.status,
            });
        }
        self.append(id, "abandoned", json!({}), now_ms())?;
        session.status = SessionStatus::Abandoned;
        Ok(session.clone())
    }

    pub async fn get(&self, id: &str) -> Result<TuningSession, TuningError> {
        Ok(self.handle(id)?.lock().await.clone())
    }

    /// Snapshot of every session, ordered by numeric id.
    pub async fn list(&self) -> Vec<TuningSession> {
        let handles: Vec<_> = self.sessions.lock().unwrap().values().cloned().collect();
        let mut out = Vec::with_capacity(handles.len());
        for h in handles {
            out.push(h.lock().await.clone());
        }
        out.sort_by_key(|s| s.id.trim_start_matches('s').parse::<u64>().unwrap_or(u64::MAX));
        out
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("session records serialize")
}

fn replay(sessions: &mut BTreeMap<String, TuningSession>, rec: LogRecord) -> Result<(), String> {
    if rec.event == "started" {
        let purpose = rec.payload["purpose"].as_str().unwrap_or_default().to_string();
        sessions.insert(
            rec.session_id.clone(),
            TuningSession {
                id: rec.session_id,
                purpose,
                status: SessionStatus::Drafting,
                iterations: Vec::new(),
                finalized_template: None,
            },
        );
        return Ok(());
    }
    let s = sessions
        .get_mut(&rec.session_id)
        .ok_or_else(|| format!("event for unknown session {}", rec.session_id))?;
    match rec.event.as_str() {
        "iteration" => {
            let it: TuningIteration = serde_json::from_value(rec.payload).map_err(|e| e.to_string())?;
            s.iterations.push(it);
            s.status = SessionStatus::Iterating;
        }
        "finalized" => {
            let id = rec.payload["template"]["id"].as_str().unwrap_or_default();
            s.status = SessionStatus::Finalized;
            s.finalized_template = Some(id.to_string());
        }
        "abandoned" => s.status = SessionStatus::Abandoned,
        other => return Err(format!("unknown event {other:?}")),
    }
    Ok(())
}
