//! The dialogue act: one user question in, one rendered answer out.
//!
//! [`DialogueEngine::run`] walks the marking graph M0 → M10 and records every
//! state in a [`DialogueTrace`]. Intent detection, conclusion detection and
//! entity extraction are issued concurrently; context selection waits for
//! all three. An empty selection ends the act at M7 without further model
//! calls.

mod format;
mod preprocess;
mod trace;
mod types;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::context_store::{ContextSelection, ContextStore, Sentiment};
use crate::llm_backend::{BackendError, ChatMessage, CompletionParams, LlmBackend};
use crate::meta_ontology::{MetaOntology, PromptTemplate, Purpose, TemplateNotFound};
use crate::prompt_engine::{
    instantiate, is_none_token, parse_response, render, Bindings, NoStructuredPayload,
    ParsedResponse, Payload, PromptError, StructuredPrompt, Violation,
};

pub use format::{
    format_results, format_with, no_contexts_answer, AnswerDocument, AnswerStatus, RenderKind,
    RenderedAnswer, RenderingRules,
};
pub use preprocess::{preprocess, PreprocessRules};
pub use trace::{DialogueTrace, Exchange, Process, State, TraceEntry};
pub use types::{
    ConclusionDirective, EntityGroup, GroupType, Intent, IntentResult, ResultValue,
    CONCLUSION_INTENT,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("input text is empty")]
    EmptyInput,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("malformed response: {reason}")]
    MalformedResponse {
        reason: String,
        violations: Vec<Violation>,
    },
    #[error(transparent)]
    Template(#[from] TemplateNotFound),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::EmptyInput => "empty-input",
            PipelineError::Backend(e) => e.code(),
            PipelineError::MalformedResponse { .. } => "malformed-response",
            PipelineError::Template(_) => "template-not-found",
            PipelineError::Prompt(_) => "prompt-error",
            PipelineError::Precondition(_) => "precondition",
        }
    }

    fn malformed(reason: impl Into<String>) -> Self {
        PipelineError::MalformedResponse {
            reason: reason.into(),
            violations: Vec::new(),
        }
    }

    fn is_malformed(&self) -> bool {
        matches!(self, PipelineError::MalformedResponse { .. })
    }
}

impl From<NoStructuredPayload> for PipelineError {
    fn from(e: NoStructuredPayload) -> Self {
        PipelineError::malformed(e.to_string())
    }
}

/// Failure of a dialogue act, tagged with the process that failed.
#[derive(Debug, Clone, Error)]
#[error("{}: {error}", process.map(Process::as_str).unwrap_or("dialogue"))]
pub struct DialogueError {
    pub process: Option<Process>,
    pub error: PipelineError,
    /// States reached before the failure.
    pub trace: DialogueTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessRules,
    /// Intents below this probability are dropped.
    pub intent_floor: f64,
    /// Used when the intent prompt carries no "max intents number".
    pub max_intents: usize,
    pub top_k: usize,
    pub sentiment_filter: Option<Sentiment>,
    pub completion: CompletionParams,
    /// Re-send the same prompt once when INT-DEF or ENT-EXTR gets a
    /// malformed response.
    pub reask_on_malformed: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessRules::default(),
            intent_floor: 0.3,
            max_intents: 4,
            top_k: 3,
            sentiment_filter: None,
            completion: CompletionParams::default(),
            reask_on_malformed: true,
        }
    }
}

// Result of one model-backed step plus everything exchanged on the way.
struct Step<T> {
    result: Result<T, PipelineError>,
    exchanges: Vec<Exchange>,
}

async fn ask<T>(
    template: &PromptTemplate,
    prompt: &StructuredPrompt,
    backend: &dyn LlmBackend,
    params: &CompletionParams,
    attempts: usize,
    convert: impl Fn(ParsedResponse) -> Result<T, PipelineError>,
) -> Step<T> {
    let text = render(prompt);
    let params = params.for_template(&template.id);
    let out = template
        .output_template
        .as_ref()
        .expect("validated templates carry an output template");
    let mut exchanges = Vec::new();
    let mut last = None;
    for _ in 0..attempts.max(1) {
        let raw = match backend.complete(&[ChatMessage::user(text.clone())], &params).await {
            Ok(raw) => raw,
            Err(e) => {
                exchanges.push(Exchange {
                    template_id: template.id.clone(),
                    prompt: text.clone(),
                    response: None,
                });
                return Step {
                    result: Err(e.into()),
                    exchanges,
                };
            }
        };
        exchanges.push(Exchange {
            template_id: template.id.clone(),
            prompt: text.clone(),
            response: Some(raw.clone()),
        });
        let result = parse_response(&raw, out)
            .map_err(PipelineError::from)
            .and_then(|parsed| {
                if parsed.violations.is_empty() {
                    convert(parsed)
                } else {
                    Err(PipelineError::MalformedResponse {
                        reason: format!("{} schema violation(s)", parsed.violations.len()),
                        violations: parsed.violations,
                    })
                }
            });
        match result {
            Err(e) if e.is_malformed() => last = Some(Err(e)),
            other => {
                return Step {
                    result: other,
                    exchanges,
                }
            }
        }
    }
    Step {
        result: last.expect("at least one attempt"),
        exchanges,
    }
}

fn bind_optional(template: &PromptTemplate, b: &mut Bindings, key: &str, value: Value) {
    if template
        .field(key)
        .is_some_and(|f| f.kind == crate::meta_ontology::FieldKind::Binding)
    {
        b.insert(key, value);
    }
}

fn text_bindings(template: &PromptTemplate, text: &str, language: Option<&str>) -> Bindings {
    let mut b = Bindings::new();
    bind_optional(template, &mut b, "text", json!(text));
    if let Some(lang) = language {
        bind_optional(template, &mut b, "language", json!(lang));
    }
    b
}

fn records(parsed: ParsedResponse) -> Vec<serde_json::Map<String, Value>> {
    match parsed.payload {
        Payload::Value(Value::Array(items)) => items
            .into_iter()
            .filter_map(|i| match i {
                Value::Object(m) => Some(m),
                _ => None,
            })
            .collect(),
        Payload::Value(Value::Object(m)) => vec![m],
        _ => Vec::new(),
    }
}

fn opt_string(v: Option<&Value>) -> Option<String> {
    v.and_then(Value::as_str).map(str::to_string)
}

fn intents_from(
    parsed: ParsedResponse,
    onto: &MetaOntology,
) -> Result<Vec<Intent>, PipelineError> {
    if parsed.payload == Payload::NoneMarker {
        return Ok(Vec::new());
    }
    records(parsed)
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let name = opt_string(r.get("intent")).unwrap_or_default();
            if !onto.intent_catalog.contains(&name) {
                return Err(PipelineError::malformed(format!(
                    "result[{i}].intent {name:?} is not a catalog intent"
                )));
            }
            let intent_type = opt_string(r.get("type")).unwrap_or_default();
            if !onto.intent_catalog.has_type(&intent_type) {
                return Err(PipelineError::malformed(format!(
                    "result[{i}].type {intent_type:?} is not a catalog intent type"
                )));
            }
            Ok(Intent {
                name,
                intent_type,
                probability: r.get("probability").and_then(Value::as_f64).unwrap_or(0.0),
                subject: opt_string(r.get("subject")),
                object: opt_string(r.get("object")),
            })
        })
        .collect()
}

/// Keeps intents at or above `floor`, highest probability first, at most `cap`.
pub fn rank_intents(mut intents: Vec<Intent>, floor: f64, cap: usize) -> Vec<Intent> {
    intents.retain(|i| i.probability >= floor);
    intents.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    intents.truncate(cap);
    intents
}

fn entities_from(parsed: ParsedResponse) -> Result<Vec<EntityGroup>, PipelineError> {
    if parsed.payload == Payload::NoneMarker {
        return Ok(Vec::new());
    }
    records(parsed)
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let words: Vec<String> = r
                .get("words")
                .and_then(Value::as_array)
                .map(|ws| ws.iter().map(|w| w.as_str().map(str::to_string)).collect())
                .unwrap_or(Some(Vec::new()))
                .ok_or_else(|| PipelineError::malformed(format!("result[{i}].words must hold strings")))?;
            if words.is_empty() {
                return Err(PipelineError::malformed(format!("result[{i}].words is empty")));
            }
            let group_type = match r.get("type").and_then(Value::as_str) {
                Some("noun") => GroupType::Noun,
                Some("verb") => GroupType::Verb,
                other => {
                    return Err(PipelineError::malformed(format!(
                        "result[{i}].type {other:?} is not noun or verb"
                    )))
                }
            };
            let main_word = opt_string(r.get("main word")).unwrap_or_default();
            if !words.contains(&main_word) {
                return Err(PipelineError::malformed(format!(
                    "result[{i}].main word {main_word:?} is not one of the group's words"
                )));
            }
            Ok(EntityGroup {
                words,
                group_type,
                main_word,
            })
        })
        .collect()
}

fn directive_from(parsed: ParsedResponse) -> Result<ConclusionDirective, PipelineError> {
    let Payload::Value(Value::Object(m)) = parsed.payload else {
        return Ok(ConclusionDirective::none());
    };
    let expected = m.get("expected").and_then(Value::as_bool).unwrap_or(false);
    let kind = opt_string(m.get("kind"));
    if !expected && kind.is_some() {
        return Err(PipelineError::malformed(
            "kind must be null when no conclusion is expected",
        ));
    }
    Ok(ConclusionDirective { expected, kind })
}

fn result_from(parsed: ParsedResponse, intent: &str) -> ResultValue {
    if parsed.payload == Payload::NoneMarker {
        return ResultValue::None;
    }
    let recs = records(parsed);
    let chosen = recs
        .iter()
        .find(|r| {
            r.get("intent")
                .and_then(Value::as_str)
                .is_some_and(|n| n.trim().eq_ignore_ascii_case(intent))
        })
        .or(recs.first());
    match chosen.and_then(|r| r.get("results")) {
        None | Some(Value::Null) => ResultValue::None,
        Some(Value::String(s)) if is_none_token(s) => ResultValue::None,
        Some(Value::Array(a)) if a.is_empty() => ResultValue::None,
        Some(v) => ResultValue::Value(v.clone()),
    }
}

fn max_intents_of(prompt: &StructuredPrompt, fallback: usize) -> usize {
    prompt
        .get("max intents number")
        .and_then(Value::as_u64)
        .map(|n| n as usize)
        .unwrap_or(fallback)
}

/// Shared, read-only inputs of dialogue acts.
#[derive(Clone)]
pub struct DialogueEngine {
    pub onto: Arc<MetaOntology>,
    pub store: Arc<ContextStore>,
    pub backend: Arc<dyn LlmBackend>,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutcome {
    pub answer: AnswerDocument,
    pub trace: DialogueTrace,
}

impl DialogueEngine {
    pub fn new(
        onto: Arc<MetaOntology>,
        store: Arc<ContextStore>,
        backend: Arc<dyn LlmBackend>,
        config: PipelineConfig,
    ) -> Self {
        Self {
            onto,
            store,
            backend,
            config,
        }
    }

    async fn intents_step(&self, text: &str, language: Option<&str>) -> Step<Vec<Intent>> {
        let t = match self.onto.lookup_template(Purpose::IntentDetection, None) {
            Ok(t) => t,
            Err(e) => return fail(e.into()),
        };
        let prompt = match instantiate(t, &text_bindings(t, text, language)) {
            Ok(p) => p,
            Err(e) => return fail(e.into()),
        };
        let cap = max_intents_of(&prompt, self.config.max_intents);
        let attempts = if self.config.reask_on_malformed { 2 } else { 1 };
        let mut step = ask(t, &prompt, self.backend.as_ref(), &self.config.completion, attempts, |p| {
            intents_from(p, &self.onto)
        })
        .await;
        step.result = step
            .result
            .map(|is| rank_intents(is, self.config.intent_floor, cap));
        step
    }

    async fn directive_step(&self, text: &str, language: Option<&str>) -> Step<ConclusionDirective> {
        let t = match self.onto.lookup_template(Purpose::ConclusionDetection, None) {
            Ok(t) => t,
            Err(e) => return fail(e.into()),
        };
        let prompt = match instantiate(t, &text_bindings(t, text, language)) {
            Ok(p) => p,
            Err(e) => return fail(e.into()),
        };
        ask(t, &prompt, self.backend.as_ref(), &self.config.completion, 1, directive_from).await
    }

    async fn entities_step(&self, text: &str, language: Option<&str>) -> Step<Vec<EntityGroup>> {
        let t = match self.onto.lookup_template(Purpose::EntityExtraction, None) {
            Ok(t) => t,
            Err(e) => return fail(e.into()),
        };
        let prompt = match instantiate(t, &text_bindings(t, text, language)) {
            Ok(p) => p,
            Err(e) => return fail(e.into()),
        };
        let attempts = if self.config.reask_on_malformed { 2 } else { 1 };
        ask(t, &prompt, self.backend.as_ref(), &self.config.completion, attempts, entities_from).await
    }

    async fn information_step(
        &self,
        intent: &Intent,
        contexts: &[String],
        text: &str,
        language: Option<&str>,
    ) -> Step<IntentResult> {
        if contexts.is_empty() {
            return fail(PipelineError::Precondition(
                "information extraction needs at least one context".into(),
            ));
        }
        let t = match self
            .onto
            .lookup_template(Purpose::InformationExtraction, Some(&intent.name))
        {
            Ok(t) => t,
            Err(e) => return fail(e.into()),
        };
        let mut b = text_bindings(t, text, language);
        bind_optional(t, &mut b, "intent", json!(intent.name));
        bind_optional(t, &mut b, "subject", json!(intent.subject));
        bind_optional(t, &mut b, "object", json!(intent.object));
        bind_optional(t, &mut b, "contexts", json!(contexts));
        let prompt = match instantiate(t, &b) {
            Ok(p) => p,
            Err(e) => return fail(e.into()),
        };
        let name = intent.name.clone();
        ask(t, &prompt, self.backend.as_ref(), &self.config.completion, 1, |p| {
            Ok(IntentResult::new(name.clone(), result_from(p, &name)))
        })
        .await
    }

    async fn conclusion_step(
        &self,
        directive: &ConclusionDirective,
        contexts: &[String],
        text: &str,
        language: Option<&str>,
    ) -> Step<IntentResult> {
        if !directive.expected {
            return fail(PipelineError::Precondition("no conclusion is expected".into()));
        }
        if contexts.is_empty() {
            return fail(PipelineError::Precondition(
                "conclusion derivation needs at least one context".into(),
            ));
        }
        let t = match self.onto.lookup_template(Purpose::ConclusionDerivation, None) {
            Ok(t) => t,
            Err(e) => return fail(e.into()),
        };
        let mut b = text_bindings(t, text, language);
        bind_optional(t, &mut b, "conclusion kind", json!(directive.kind));
        bind_optional(t, &mut b, "contexts", json!(contexts));
        let prompt = match instantiate(t, &b) {
            Ok(p) => p,
            Err(e) => return fail(e.into()),
        };
        ask(t, &prompt, self.backend.as_ref(), &self.config.completion, 1, |p| {
            Ok(IntentResult::new(CONCLUSION_INTENT, result_from(p, CONCLUSION_INTENT)))
        })
        .await
    }

    /// INT-DEF on already preprocessed text.
    pub async fn detect_intents(&self, text: &str) -> Result<Vec<Intent>, PipelineError> {
        self.intents_step(text, None).await.result
    }

    /// CON-INT-DEF on already preprocessed text.
    pub async fn detect_conclusion_directive(
        &self,
        text: &str,
    ) -> Result<ConclusionDirective, PipelineError> {
        self.directive_step(text, None).await.result
    }

    /// ENT-EXTR on already preprocessed text.
    pub async fn extract_entities(&self, text: &str) -> Result<Vec<EntityGroup>, PipelineError> {
        self.entities_step(text, None).await.result
    }

    /// INF-EXTR for one intent over the given context texts.
    pub async fn extract_information(
        &self,
        intent: &Intent,
        contexts: &[String],
        text: &str,
    ) -> Result<IntentResult, PipelineError> {
        self.information_step(intent, contexts, text, None).await.result
    }

    /// CON-DER over the given context texts.
    pub async fn derive_conclusions(
        &self,
        directive: &ConclusionDirective,
        contexts: &[String],
        text: &str,
    ) -> Result<IntentResult, PipelineError> {
        self.conclusion_step(directive, contexts, text, None).await.result
    }

    pub fn select(&self, entities: &[EntityGroup], intents: &[Intent]) -> ContextSelection {
        self.store.select_contexts(
            entities,
            intents,
            self.config.top_k.max(1),
            self.config.sentiment_filter,
        )
    }

    /// Runs one full dialogue act on raw user text.
    pub async fn run(
        &self,
        text: &str,
        language: Option<&str>,
    ) -> Result<DialogueOutcome, DialogueError> {
        let mut trace = DialogueTrace::default();
        let started = Instant::now();
        trace.push(entry(State::M0, None, json!({ "text": text }), vec![], started));

        let t = Instant::now();
        let cleaned = match preprocess(text, &self.config.preprocess) {
            Ok(c) => c,
            Err(error) => return Err(failed(Process::Prep, error, trace)),
        };
        trace.push(entry(State::M1, Some(Process::Prep), json!({ "text": cleaned }), vec![], t));

        let t = Instant::now();
        let (intents, directive, entities) = tokio::join!(
            self.intents_step(&cleaned, language),
            self.directive_step(&cleaned, language),
            self.entities_step(&cleaned, language),
        );
        let branch_elapsed = t;
        let intents_val = match intents.result {
            Ok(v) => v,
            Err(error) => return Err(failed(Process::IntDef, error, trace)),
        };
        let directive_val = match directive.result {
            Ok(v) => v,
            Err(error) => return Err(failed(Process::ConIntDef, error, trace)),
        };
        let entities_val = match entities.result {
            Ok(v) => v,
            Err(error) => return Err(failed(Process::EntExtr, error, trace)),
        };
        trace.push(entry(
            State::M2,
            Some(Process::IntDef),
            to_value(&intents_val),
            intents.exchanges,
            branch_elapsed,
        ));
        trace.push(entry(
            State::M4,
            Some(Process::ConIntDef),
            to_value(&directive_val),
            directive.exchanges,
            branch_elapsed,
        ));
        trace.push(entry(
            State::M6,
            Some(Process::EntExtr),
            to_value(&entities_val),
            entities.exchanges,
            branch_elapsed,
        ));

        let t = Instant::now();
        let selection = self.select(&entities_val, &intents_val);
        trace.push(entry(State::M7, Some(Process::CxSel), to_value(&selection), vec![], t));
        let rules = RenderingRules::from_ontology(&self.onto);
        if selection.is_empty() {
            return Ok(DialogueOutcome {
                answer: no_contexts_answer(&rules),
                trace,
            });
        }
        let contexts = self.store.texts(&selection);

        let mut parts = Vec::with_capacity(intents_val.len() + 1);
        for intent in &intents_val {
            let t = Instant::now();
            let step = self.information_step(intent, &contexts, &cleaned, language).await;
            match step.result {
                Ok(r) => {
                    trace.push(entry(State::M8, Some(Process::InfExtr), to_value(&r), step.exchanges, t));
                    parts.push(r);
                }
                Err(error) => return Err(failed(Process::InfExtr, error, trace)),
            }
        }
        if directive_val.expected {
            let t = Instant::now();
            let step = self.conclusion_step(&directive_val, &contexts, &cleaned, language).await;
            match step.result {
                Ok(r) => {
                    trace.push(entry(State::M9, Some(Process::ConDer), to_value(&r), step.exchanges, t));
                    parts.push(r);
                }
                Err(error) => return Err(failed(Process::ConDer, error, trace)),
            }
        }

        let t = Instant::now();
        let answer = format_with(&parts, &rules);
        trace.push(entry(State::M10, Some(Process::ResForm), to_value(&answer), vec![], t));
        Ok(DialogueOutcome { answer, trace })
    }
}

/// Runs one dialogue act with `engine`.
pub async fn run_dialogue_act(
    engine: &DialogueEngine,
    text: &str,
) -> Result<DialogueOutcome, DialogueError> {
    engine.run(text, None).await
}

fn fail<T>(error: PipelineError) -> Step<T> {
    Step {
        result: Err(error),
        exchanges: Vec::new(),
    }
}

fn failed(process: Process, error: PipelineError, trace: DialogueTrace) -> DialogueError {
    DialogueError {
        process: Some(process),
        error,
        trace,
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("trace payloads serialize")
}

fn entry(
    state: State,
    process: Option<Process>,
    payload: Value,
    exchanges: Vec<Exchange>,
    since: Instant,
) -> TraceEntry {
    TraceEntry {
        state,
        process,
        payload,
        exchanges,
        elapsed_us: since.elapsed().as_micros() as u64,
    }
}
