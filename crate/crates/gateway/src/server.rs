//! HTTP API over the engine.
//!
//! Every route is listed once in [`ENDPOINTS`]; the router and the service
//! descriptor are both built from that table. Requests carry no server-side
//! conversation state: each chat request is a complete dialogue act against
//! the current ontology snapshot.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path as UrlPath, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, MethodRouter};
use axum::{Json, Router};
use ontoprompt_core::context_store::{load_contexts, ContextStore};
use ontoprompt_core::dialogue::{DialogueEngine, DialogueError, PipelineConfig, PipelineError};
use ontoprompt_core::evaluation::{compute_metrics, Judgment, JudgmentError, JudgmentStore};
use ontoprompt_core::llm_backend::{
    load_script, BackendError, LlmBackend, RemoteBackend,
};
use ontoprompt_core::meta_learning::{IterationPrompt, TuningError, TuningRegistry};
use ontoprompt_core::meta_ontology::{
    load_meta_ontology, serialize_meta_ontology, MetaOntology, PromptTemplate,
};
use ontoprompt_core::prompt_engine::{instantiate, Bindings};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::Mutex;

use crate::config::{BackendKind, ConfigError, EngineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Endpoint {
    pub method: &'static str,
    pub path: &'static str,
    pub input: &'static str,
    pub output: &'static str,
    pub summary: &'static str,
}

const fn ep(
    method: &'static str,
    path: &'static str,
    input: &'static str,
    output: &'static str,
    summary: &'static str,
) -> Endpoint {
    Endpoint {
        method,
        path,
        input,
        output,
        summary,
    }
}

pub const ENDPOINTS: &[Endpoint] = &[
    ep("POST", "/v1/chat", "{text, language?, trace?}", "{answer, trace?}", "Run one dialogue act on a question."),
    ep("GET", "/v1/descriptor", "none", "ServiceDescriptor", "This descriptor."),
    ep("GET", "/v1/meta-ontology", "none", "meta-ontology document", "Current ontology snapshot in canonical form."),
    ep("GET", "/v1/contexts", "none", "context document", "The loaded context store."),
    ep("GET", "/v1/tuning/sessions", "none", "[TuningSession]", "All tuning sessions, oldest first."),
    ep("POST", "/v1/tuning/sessions", "{purpose}", "TuningSession", "Start a tuning session."),
    ep("GET", "/v1/tuning/sessions/{id}", "none", "TuningSession", "One tuning session with its iterations."),
    ep("POST", "/v1/tuning/sessions/{id}/iterations", "{prompt, notes?}", "TuningIteration", "Send a draft or instantiated prompt to the backend and record the reply."),
    ep("POST", "/v1/tuning/sessions/{id}/finalize", "{template}", "{session, templates, meta_ontology_version}", "Add the tuned template to a new ontology snapshot and make it current."),
    ep("POST", "/v1/tuning/sessions/{id}/abandon", "none", "TuningSession", "Close a session without changing the ontology."),
    ep("POST", "/v1/eval/judgments", "Judgment | [Judgment]", "{accepted, counts}", "Record labelled answers."),
    ep("GET", "/v1/eval/metrics", "none", "{counts, metrics}", "Counts and the seven metrics over all recorded judgments."),
];

/// Machine- and human-readable description of the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub preconditions: Vec<String>,
    pub effects: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub provider: String,
    pub description_machine: Value,
    pub description_human: String,
}

pub fn descriptor() -> ServiceDescriptor {
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
    ServiceDescriptor {
        preconditions: s(&[
            "meta-ontology document loads and validates",
            "context document loads",
            "a completion backend is configured",
        ]),
        effects: s(&[
            "chat requests leave no server-side state",
            "finalizing a tuning session replaces the current ontology snapshot",
            "tuning events and judgments are appended to their logs when configured",
        ]),
        inputs: s(&["question text with optional language", "tuning prompts and templates", "answer judgments"]),
        outputs: s(&["answer document with dialogue trace", "tuning session records", "evaluation metrics"]),
        provider: format!("ontoprompt-gateway {}", env!("CARGO_PKG_VERSION")),
        description_machine: json!({
            "name": "ontoprompt",
            "version": env!("CARGO_PKG_VERSION"),
            "media_type": "application/json; charset=utf-8",
            "error_body": {"error": {"process": "string?", "code": "string", "message": "string"}},
            "endpoints": ENDPOINTS,
        }),
        description_human: "Answers questions by sending ontology-defined structured prompts to a chat-completion \
            model: intents and entities are detected, relevant contexts are selected, answers are extracted \
            per intent and formatted. Prompt templates can be tuned in recorded sessions and answer quality \
            scored from human judgments."
            .into(),
    }
}

pub struct AppState {
    onto: RwLock<Arc<MetaOntology>>,
    store: Arc<ContextStore>,
    backend: Arc<dyn LlmBackend>,
    pipeline: PipelineConfig,
    tuning: TuningRegistry,
    judgments: JudgmentStore,
    // one finalize at a time, so snapshots never fork
    finalize: Mutex<()>,
}

fn load_err(path: &Path, message: impl ToString) -> ConfigError {
    ConfigError::Load {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| load_err(path, e))
}

impl AppState {
    pub fn new(
        onto: MetaOntology,
        store: ContextStore,
        backend: Arc<dyn LlmBackend>,
        pipeline: PipelineConfig,
    ) -> Self {
        Self {
            onto: RwLock::new(Arc::new(onto)),
            store: Arc::new(store),
            backend,
            pipeline,
            tuning: TuningRegistry::in_memory(),
            judgments: JudgmentStore::in_memory(),
            finalize: Mutex::new(()),
        }
    }

    pub fn from_config(config: &EngineConfig) -> Result<Self, ConfigError> {
        let onto = load_meta_ontology(&read(&config.meta)?).map_err(|e| load_err(&config.meta, e))?;
        let store = load_contexts(&read(&config.contexts)?).map_err(|e| load_err(&config.contexts, e))?;
        let backend: Arc<dyn LlmBackend> = match config.backend.kind {
            BackendKind::Remote => Arc::new(RemoteBackend::new(config.remote())),
            BackendKind::Scripted => {
                let path = config.backend.script.as_deref().expect("validated config");
                Arc::new(load_script(&read(path)?).map_err(|e| load_err(path, e))?)
            }
        };
        let mut state = Self::new(onto, store, backend, config.pipeline());
        if let Some(path) = &config.sessions_log {
            state.tuning = TuningRegistry::open(path).map_err(|e| load_err(path, e))?;
        }
        if let Some(path) = &config.judgments_log {
            state.judgments = JudgmentStore::open(path).map_err(|e| load_err(path, e))?;
        }
        Ok(state)
    }

    pub fn snapshot(&self) -> Arc<MetaOntology> {
        self.onto.read().unwrap().clone()
    }

    pub fn engine(&self) -> DialogueEngine {
        DialogueEngine::new(
            self.snapshot(),
            self.store.clone(),
            self.backend.clone(),
            self.pipeline.clone(),
        )
    }

    pub fn backend(&self) -> Arc<dyn LlmBackend> {
        self.backend.clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub process: Option<String>,
    pub code: String,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl ToString) -> Self {
        Self {
            status,
            process: None,
            code: code.into(),
            message: message.to_string(),
            details: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = Map::new();
        if let Some(p) = self.process {
            body.insert("process".into(), json!(p));
        }
        body.insert("code".into(), json!(self.code));
        body.insert("message".into(), json!(self.message));
        if let Some(d) = self.details {
            body.insert("details".into(), d);
        }
        (self.status, Json(json!({ "error": body }))).into_response()
    }
}

fn backend_status(e: &BackendError) -> StatusCode {
    match e {
        BackendError::Timeout(_) => StatusCode::GATEWAY_TIMEOUT,
        BackendError::InvalidRequest(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_GATEWAY,
    }
}

impl From<DialogueError> for ApiError {
    fn from(e: DialogueError) -> Self {
        let status = match &e.error {
            PipelineError::EmptyInput => StatusCode::BAD_REQUEST,
            PipelineError::Backend(b) => backend_status(b),
            PipelineError::MalformedResponse { .. } => StatusCode::BAD_GATEWAY,
            PipelineError::Template(_) | PipelineError::Prompt(_) | PipelineError::Precondition(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        let details = match &e.error {
            PipelineError::MalformedResponse { violations, .. } if !violations.is_empty() => {
                Some(json!({ "violations": violations }))
            }
            _ => None,
        };
        Self {
            status,
            process: e.process.map(|p| p.as_str().to_string()),
            code: e.error.code().into(),
            message: e.error.to_string(),
            details,
        }
    }
}

impl From<TuningError> for ApiError {
    fn from(e: TuningError) -> Self {
        let status = match &e {
            TuningError::EmptyPurpose => StatusCode::BAD_REQUEST,
            TuningError::NotFound(_) => StatusCode::NOT_FOUND,
            TuningError::SessionClosed { .. } | TuningError::NoIterations(_) => StatusCode::CONFLICT,
            TuningError::Backend(b) => backend_status(b),
            TuningError::ValidationFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            TuningError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let details = match &e {
            TuningError::ValidationFailed(d) => Some(json!({ "diagnostics": d })),
            _ => None,
        };
        Self {
            details,
            ..ApiError::new(status, e.code(), &e)
        }
    }
}

impl From<JudgmentError> for ApiError {
    fn from(e: JudgmentError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "log-error", e)
    }
}

/// JSON body whose rejections use the service's error shape.
pub struct Body<T>(pub T);

impl<S, T> FromRequest<S> for Body<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, "bad-request", e.body_text())),
        }
    }
}

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<T, ApiError>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChatRequest {
    text: String,
    language: Option<String>,
    #[serde(default = "yes")]
    trace: bool,
}

fn yes() -> bool {
    true
}

async fn chat(State(s): Shared, Body(req): Body<ChatRequest>) -> ApiResult<Json<Value>> {
    let started = Instant::now();
    let out = s.engine().run(&req.text, req.language.as_deref()).await;
    tracing::info!(elapsed_ms = started.elapsed().as_millis() as u64, ok = out.is_ok(), "chat");
    let out = out?;
    let mut body = json!({ "answer": out.answer });
    if req.trace {
        body["trace"] = serde_json::to_value(&out.trace).expect("traces serialize");
    }
    Ok(Json(body))
}

async fn get_descriptor() -> Json<ServiceDescriptor> {
    Json(descriptor())
}

fn json_text(text: String) -> Response {
    ([("content-type", "application/json")], text).into_response()
}

async fn get_meta(State(s): Shared) -> Response {
    json_text(serialize_meta_ontology(&s.snapshot()))
}

async fn get_contexts(State(s): Shared) -> Response {
    json_text(s.store.to_document())
}

async fn list_sessions(State(s): Shared) -> Json<Value> {
    Json(json!(s.tuning.list().await))
}

#[derive(Deserialize)]
struct StartRequest {
    purpose: String,
}

async fn start_session(State(s): Shared, Body(req): Body<StartRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    let session = s.tuning.start_session(&req.purpose)?;
    Ok((StatusCode::CREATED, Json(json!(session))))
}

async fn get_session(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(s.tuning.get(&id).await?)))
}

/// A prompt to try: free text, a template from the current snapshot, or an
/// inline template not yet in any snapshot.
#[derive(Deserialize)]
#[serde(untagged)]
enum PromptSpec {
    Draft(String),
    Stored {
        template_id: String,
        #[serde(default)]
        bindings: Map<String, Value>,
    },
    Inline {
        template: Box<PromptTemplate>,
        #[serde(default)]
        bindings: Map<String, Value>,
    },
}

#[derive(Deserialize)]
struct IterationRequest {
    prompt: PromptSpec,
    #[serde(default)]
    notes: String,
}

fn bindings(map: Map<String, Value>) -> Bindings {
    let mut b = Bindings::new();
    for (k, v) in map {
        b.insert(k, v);
    }
    b
}

async fn submit_iteration(
    State(s): Shared,
    UrlPath(id): UrlPath<String>,
    Body(req): Body<IterationRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let bad = |e: &dyn ToString| ApiError::new(StatusCode::BAD_REQUEST, "prompt-error", e.to_string());
    let prompt = match req.prompt {
        PromptSpec::Draft(text) => IterationPrompt::Draft(text),
        PromptSpec::Stored { template_id, bindings: b } => {
            let onto = s.snapshot();
            let t = onto.template(&template_id).ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, "template-not-found", format!("no template {template_id:?}"))
            })?;
            IterationPrompt::Structured(instantiate(t, &bindings(b)).map_err(|e| bad(&e))?)
        }
        PromptSpec::Inline { template, bindings: b } => {
            IterationPrompt::Structured(instantiate(&template, &bindings(b)).map_err(|e| bad(&e))?)
        }
    };
    let it = s
        .tuning
        .submit_iteration(&id, prompt, &req.notes, s.backend.as_ref(), &s.pipeline.completion)
        .await?;
    Ok((StatusCode::CREATED, Json(json!(it))))
}

#[derive(Deserialize)]
struct FinalizeRequest {
    template: PromptTemplate,
}

async fn finalize_session(
    State(s): Shared,
    UrlPath(id): UrlPath<String>,
    Body(req): Body<FinalizeRequest>,
) -> ApiResult<Json<Value>> {
    let _one = s.finalize.lock().await;
    let current = s.snapshot();
    let next = s.tuning.finalize_session(&id, req.template, &current).await?;
    let body = json!({
        "session": s.tuning.get(&id).await?,
        "templates": next.templates.len(),
        "meta_ontology_version": next.version,
    });
    *s.onto.write().unwrap() = Arc::new(next);
    Ok(Json(body))
}

async fn abandon_session(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(s.tuning.abandon_session(&id).await?)))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Judgments {
    Many(Vec<Judgment>),
    One(Judgment),
}

async fn post_judgments(State(s): Shared, Body(req): Body<Judgments>) -> ApiResult<(StatusCode, Json<Value>)> {
    let batch = match req {
        Judgments::Many(js) => js,
        Judgments::One(j) => vec![j],
    };
    s.judgments.append(&batch)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "accepted": batch.len(), "counts": s.judgments.counts() })),
    ))
}

async fn get_metrics(State(s): Shared) -> Json<Value> {
    let counts = s.judgments.counts();
    Json(json!({ "counts": counts, "metrics": compute_metrics(counts).to_json() }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "unknown-endpoint", "no such endpoint")
}

async fn wrong_method() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method-not-allowed", "method not allowed for this endpoint")
}

fn handler(method: &str, path: &str) -> MethodRouter<Arc<AppState>> {
    match (method, path) {
        ("POST", "/v1/chat") => post(chat),
        ("GET", "/v1/descriptor") => get(get_descriptor),
        ("GET", "/v1/meta-ontology") => get(get_meta),
        ("GET", "/v1/contexts") => get(get_contexts),
        ("GET", "/v1/tuning/sessions") => get(list_sessions),
        ("POST", "/v1/tuning/sessions") => post(start_session),
        ("GET", "/v1/tuning/sessions/{id}") => get(get_session),
        ("POST", "/v1/tuning/sessions/{id}/iterations") => post(submit_iteration),
        ("POST", "/v1/tuning/sessions/{id}/finalize") => post(finalize_session),
        ("POST", "/v1/tuning/sessions/{id}/abandon") => post(abandon_session),
        ("POST", "/v1/eval/judgments") => post(post_judgments),
        ("GET", "/v1/eval/metrics") => get(get_metrics),
        other => unreachable!("endpoint table entry without handler: {other:?}"),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut routes: Vec<(&str, MethodRouter<Arc<AppState>>)> = Vec::new();
    for e in ENDPOINTS {
        let h = handler(e.method, e.path);
        match routes.iter_mut().find(|(p, _)| *p == e.path) {
            Some((_, existing)) => *existing = std::mem::take(existing).merge(h),
            None => routes.push((e.path, h)),
        }
    }
    let mut app = Router::new();
    for (path, h) in routes {
        app = app.route(path, h.fallback(wrong_method));
    }
    app.fallback(not_found).with_state(state)
}

/// Binds `addr` and serves until Ctrl-C. `on_bound` sees the actual address.
pub async fn serve(
    state: Arc<AppState>,
    addr: &str,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
