//! The meta-ontology: the catalog of prompt templates that drives every
//! structured prompt the engine sends.
//!
//! A [`MetaOntology`] is loaded from a JSON document, validated against its
//! invariants, and then treated as an immutable snapshot. Updates (for
//! example from a finalized tuning session) build a new snapshot.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Intents every catalog must carry.
pub const BASE_INTENTS: [&str; 16] = [
    "quantity",
    "place",
    "way of doing",
    "object",
    "subject",
    "action",
    "location",
    "direction",
    "scene of action",
    "conditions",
    "instrument",
    "collaborator",
    "relation",
    "cause",
    "sequence",
    "origin",
];

/// Intent types every catalog must carry.
pub const BASE_INTENT_TYPES: [&str; 3] = ["narration", "interrogation", "imperative"];

/// Key under which a template's output template is embedded in a prompt.
pub const OUTPUT_TEMPLATE_KEY: &str = "output representation template";

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("no template for purpose {purpose}")]
pub struct TemplateNotFound {
    pub purpose: Purpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    IntentDetection,
    ConclusionDetection,
    EntityExtraction,
    InformationExtraction,
    ConclusionDerivation,
    ResultFormatting,
}

impl Purpose {
    pub const ALL: [Purpose; 6] = [
        Purpose::IntentDetection,
        Purpose::ConclusionDetection,
        Purpose::EntityExtraction,
        Purpose::InformationExtraction,
        Purpose::ConclusionDerivation,
        Purpose::ResultFormatting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::IntentDetection => "intent-detection",
            Purpose::ConclusionDetection => "conclusion-detection",
            Purpose::EntityExtraction => "entity-extraction",
            Purpose::InformationExtraction => "information-extraction",
            Purpose::ConclusionDerivation => "conclusion-derivation",
            Purpose::ResultFormatting => "result-formatting",
        }
    }

    /// Purposes that must have exactly one default template.
    fn needs_single_default(self) -> bool {
        self != Purpose::InformationExtraction
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentCatalog {
    pub intents: Vec<String>,
    pub intent_types: Vec<String>,
}

impl IntentCatalog {
    pub fn contains(&self, intent: &str) -> bool {
        self.intents.iter().any(|i| i == intent)
    }

    pub fn has_type(&self, ty: &str) -> bool {
        self.intent_types.iter().any(|t| t == ty)
    }
}

impl Default for IntentCatalog {
    fn default() -> Self {
        Self {
            intents: BASE_INTENTS.iter().map(|s| s.to_string()).collect(),
            intent_types: BASE_INTENT_TYPES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Constant,
    Binding,
    BooleanFlag,
    AllowedValuesList,
    IntegerLimit,
    NestedStructure,
}

/// One field of a prompt template.
///
/// Which of the optional members are meaningful depends on `kind`:
/// constants, flags, limits and nested structures carry `value`; bindings
/// may carry a `default` and an `allowed` set; allowed-values lists carry
/// `allowed` and a `default` selection; integer limits carry `bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptField {
    pub key: String,
    pub kind: FieldKind,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<u64>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub required: bool,
}

// An explicit `null` is a value, not an absent member.
fn present<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl PromptField {
    pub fn constant(key: impl Into<String>, value: Value) -> Self {
        Self::with_kind(key, FieldKind::Constant, Some(value))
    }

    pub fn flag(key: impl Into<String>, value: bool) -> Self {
        Self::with_kind(key, FieldKind::BooleanFlag, Some(Value::Bool(value)))
    }

    pub fn binding(key: impl Into<String>, required: bool, default: Option<Value>) -> Self {
        let mut f = Self::with_kind(key, FieldKind::Binding, None);
        f.required = required;
        f.default = default;
        f
    }

    fn with_kind(key: impl Into<String>, kind: FieldKind, value: Option<Value>) -> Self {
        Self {
            key: key.into(),
            kind,
            value,
            default: None,
            allowed: None,
            bound: None,
            required: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    StructuredObject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cardinality {
    One,
    Many,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueKind {
    String,
    FloatInUnitInterval,
    Enum,
    NullableString,
    List,
    Object,
    Boolean,
    /// Any value, including null.
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaField {
    pub kind: ValueKind,
    /// Text shown to the model in the embedded output template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Allowed values, for `enum` fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,
}

impl SchemaField {
    fn display_text(&self) -> String {
        if let Some(d) = &self.description {
            return d.clone();
        }
        match (self.kind, &self.values) {
            (ValueKind::Enum, Some(vs)) => vs.join(", "),
            (ValueKind::String, _) => "string".into(),
            (ValueKind::FloatInUnitInterval, _) => "float value from 0 to 1".into(),
            (ValueKind::NullableString, _) => "string or null".into(),
            (ValueKind::List, _) => "list".into(),
            (ValueKind::Object, _) => "object".into(),
            (ValueKind::Boolean, _) => "boolean".into(),
            (ValueKind::Any, _) | (ValueKind::Enum, None) => "value".into(),
        }
    }
}

/// Shape the model is told to answer in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputTemplate {
    pub format: OutputFormat,
    /// Wrapper key around the records, e.g. `"result"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
    pub cardinality: Cardinality,
    pub schema: IndexMap<String, SchemaField>,
    #[serde(default)]
    pub required: Vec<String>,
}

impl OutputTemplate {
    /// The value embedded in prompts under [`OUTPUT_TEMPLATE_KEY`].
    pub fn representation(&self) -> Value {
        let record: serde_json::Map<String, Value> = self
            .schema
            .iter()
            .map(|(k, f)| (k.clone(), Value::String(f.display_text())))
            .collect();
        let body = match self.cardinality {
            Cardinality::One => Value::Object(record),
            Cardinality::Many => Value::Array(vec![Value::Object(record)]),
        };
        match &self.root {
            Some(root) => {
                let mut m = serde_json::Map::new();
                m.insert(root.clone(), body);
                Value::Object(m)
            }
            None => body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub purpose: Purpose,
    #[serde(default, skip_serializing_if = "is_false")]
    pub default: bool,
    #[serde(default)]
    pub applicable_intents: Vec<String>,
    pub fields: Vec<PromptField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_template: Option<OutputTemplate>,
    #[serde(default)]
    pub notes: String,
}

impl PromptTemplate {
    pub fn field(&self, key: &str) -> Option<&PromptField> {
        self.fields.iter().find(|f| f.key == key)
    }

    pub fn applies_to(&self, intent: &str) -> bool {
        self.applicable_intents.iter().any(|i| i == intent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaOntology {
    pub version: String,
    pub intent_catalog: IntentCatalog,
    pub templates: Vec<PromptTemplate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn error(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            path: path.into(),
            message: message.into(),
        }
    }

    fn warning(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.path, self.message)
    }
}

/// Parses and validates a meta-ontology document.
pub fn load_meta_ontology(document: &str) -> Result<MetaOntology, OntologyError> {
    if document.trim().is_empty() {
        return Err(OntologyError::Parse("empty document".into()));
    }
    let onto: MetaOntology =
        serde_json::from_str(document).map_err(|e| OntologyError::Parse(e.to_string()))?;
    if let Some(d) = validate_meta_ontology(&onto)
        .into_iter()
        .find(|d| d.severity == Severity::Error)
    {
        return Err(OntologyError::Schema {
            path: d.path,
            message: d.message,
        });
    }
    Ok(onto)
}

/// Canonical form: declaration key order, 2-space indent, LF, trailing newline.
pub fn serialize_meta_ontology(onto: &MetaOntology) -> String {
    let mut out = serde_json::to_string_pretty(onto).expect("meta-ontology is always serializable");
    out.push('\n');
    out
}

impl MetaOntology {
    /// Picks the template for `purpose`: an intent-specific template naming
    /// `intent` if one exists (first declared wins), else the purpose default.
    pub fn lookup_template(
        &self,
        purpose: Purpose,
        intent: Option<&str>,
    ) -> Result<&PromptTemplate, TemplateNotFound> {
        let mut candidates = self.templates.iter().filter(|t| t.purpose == purpose);
        if let Some(intent) = intent {
            if let Some(t) = candidates.clone().find(|t| t.applies_to(intent)) {
                return Ok(t);
            }
        }
        candidates
            .find(|t| t.default)
            .ok_or(TemplateNotFound { purpose })
    }

    pub fn template(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    /// Returns a new snapshot with `template` appended. `self` is untouched.
    pub fn with_template(&self, template: PromptTemplate) -> MetaOntology {
        let mut next = self.clone();
        next.templates.push(template);
        next
    }
}

pub fn lookup_template<'a>(
    onto: &'a MetaOntology,
    purpose: Purpose,
    intent: Option<&str>,
) -> Result<&'a PromptTemplate, TemplateNotFound> {
    onto.lookup_template(purpose, intent)
}

/// Checks every invariant of the meta-ontology. Never fails; an empty list
/// means the ontology is valid.
pub fn validate_meta_ontology(onto: &MetaOntology) -> Vec<Diagnostic> {
    let mut diags = Vec::new();

    if onto.version.trim().is_empty() {
        diags.push(Diagnostic::error("version", "version must be non-empty"));
    }
    validate_catalog(&onto.intent_catalog, &mut diags);

    let mut ids = HashSet::new();
    for (i, t) in onto.templates.iter().enumerate() {
        let path = format!("templates[{i}]");
        if t.id.trim().is_empty() {
            diags.push(Diagnostic::error(format!("{path}.id"), "template id must be non-empty"));
        } else if !ids.insert(t.id.as_str()) {
            diags.push(Diagnostic::error(
                format!("{path}.id"),
                format!("duplicate template id {:?}", t.id),
            ));
        }
        validate_template(t, &onto.intent_catalog, &path, &mut diags);
    }

    for purpose in Purpose::ALL {
        let defaults: Vec<usize> = onto
            .templates
            .iter()
            .enumerate()
            .filter(|(_, t)| t.purpose == purpose && t.default)
            .map(|(i, _)| i)
            .collect();
        match defaults.len() {
            0 if purpose.needs_single_default() => diags.push(Diagnostic::error(
                "templates",
                format!("no default template for purpose {purpose}"),
            )),
            0 => diags.push(Diagnostic::warning(
                "templates",
                format!("no default template for purpose {purpose}; unmatched intents cannot be served"),
            )),
            1 => {}
            _ => diags.push(Diagnostic::error(
                format!("templates[{}].default", defaults[1]),
                format!("more than one default template for purpose {purpose}"),
            )),
        }
    }
    diags
}

fn validate_catalog(catalog: &IntentCatalog, diags: &mut Vec<Diagnostic>) {
    for base in BASE_INTENTS {
        if !catalog.contains(base) {
            diags.push(Diagnostic::error(
                "intent_catalog.intents",
                format!("missing base intent {base:?}"),
            ));
        }
    }
    for base in BASE_INTENT_TYPES {
        if !catalog.has_type(base) {
            diags.push(Diagnostic::error(
                "intent_catalog.intent_types",
                format!("missing intent type {base:?}"),
            ));
        }
    }
    let mut seen = HashSet::new();
    for (i, name) in catalog.intents.iter().enumerate() {
        if name.trim().is_empty() {
            diags.push(Diagnostic::error(
                format!("intent_catalog.intents[{i}]"),
                "intent name must be non-empty",
            ));
        } else if !seen.insert(name.as_str()) {
            diags.push(Diagnostic::warning(
                format!("intent_catalog.intents[{i}]"),
                format!("duplicate intent {name:?}"),
            ));
        }
    }
}

fn validate_template(
    t: &PromptTemplate,
    catalog: &IntentCatalog,
    path: &str,
    diags: &mut Vec<Diagnostic>,
) {
    for (j, intent) in t.applicable_intents.iter().enumerate() {
        if !catalog.contains(intent) {
            diags.push(Diagnostic::error(
                format!("{path}.applicable_intents[{j}]"),
                format!("intent {intent:?} is not in the intent catalog"),
            ));
        }
    }
    if !t.applicable_intents.is_empty() && t.purpose != Purpose::InformationExtraction {
        diags.push(Diagnostic::warning(
            format!("{path}.applicable_intents"),
            "applicable_intents only affects information-extraction templates",
        ));
    }

    let mut keys = HashSet::new();
    for (j, f) in t.fields.iter().enumerate() {
        let fpath = format!("{path}.fields[{j}]");
        if f.key.trim().is_empty() {
            diags.push(Diagnostic::error(format!("{fpath}.key"), "field key must be non-empty"));
        } else if !keys.insert(f.key.as_str()) {
            diags.push(Diagnostic::error(
                format!("{fpath}.key"),
                format!("duplicate field key {:?}", f.key),
            ));
        }
        if f.key == OUTPUT_TEMPLATE_KEY {
            diags.push(Diagnostic::error(
                format!("{fpath}.key"),
                format!("{OUTPUT_TEMPLATE_KEY:?} is reserved for the output template"),
            ));
        }
        validate_field(f, &fpath, diags);
    }

    match (&t.output_template, t.purpose) {
        (None, Purpose::ResultFormatting) => {}
        (None, p) => diags.push(Diagnostic::error(
            format!("{path}.output_template"),
            format!("output_template is required for purpose {p}"),
        )),
        (Some(out), _) => validate_output_template(out, &format!("{path}.output_template"), diags),
    }
}

fn validate_field(f: &PromptField, path: &str, diags: &mut Vec<Diagnostic>) {
    match f.kind {
        FieldKind::Constant | FieldKind::NestedStructure => match &f.value {
            None => diags.push(Diagnostic::error(format!("{path}.value"), "missing value")),
            Some(v) if f.kind == FieldKind::NestedStructure && !(v.is_object() || v.is_array()) => {
                diags.push(Diagnostic::error(
                    format!("{path}.value"),
                    "nested-structure value must be an object or list",
                ))
            }
            _ => {}
        },
        FieldKind::BooleanFlag => {
            if !matches!(f.value, Some(Value::Bool(_))) {
                diags.push(Diagnostic::error(
                    format!("{path}.value"),
                    "boolean-flag value must be true or false",
                ));
            }
        }
        FieldKind::Binding => {
            if !f.required && f.default.is_none() {
                diags.push(Diagnostic::error(
                    format!("{path}.default"),
                    "binding field must be required or carry a default",
                ));
            }
            if let (Some(allowed), Some(d)) = (&f.allowed, &f.default) {
                if !d.is_null() && !allowed.contains(d) {
                    diags.push(Diagnostic::error(
                        format!("{path}.default"),
                        "default is not in the allowed set",
                    ));
                }
            }
        }
        FieldKind::AllowedValuesList => match &f.allowed {
            None => diags.push(Diagnostic::error(
                format!("{path}.allowed"),
                "allowed-values-list field needs a non-empty allowed set",
            )),
            Some(a) if a.is_empty() => diags.push(Diagnostic::error(
                format!("{path}.allowed"),
                "allowed-values-list field needs a non-empty allowed set",
            )),
            Some(allowed) => {
                let selection = f.value.as_ref().or(f.default.as_ref());
                match selection {
                    None => {
                        if !f.required {
                            diags.push(Diagnostic::error(
                                format!("{path}.default"),
                                "allowed-values-list field needs a selection",
                            ));
                        }
                    }
                    Some(Value::Array(items)) => {
                        if let Some(bad) = items.iter().find(|v| !allowed.contains(v)) {
                            diags.push(Diagnostic::error(
                                format!("{path}.default"),
                                format!("{bad} is not in the allowed set"),
                            ));
                        }
                    }
                    Some(_) => diags.push(Diagnostic::error(
                        format!("{path}.default"),
                        "allowed-values-list selection must be a list",
                    )),
                }
            }
        },
        FieldKind::IntegerLimit => match f.bound {
            None | Some(0) => diags.push(Diagnostic::error(
                format!("{path}.bound"),
                "integer-limit field needs a positive bound",
            )),
            Some(bound) => match f.value.as_ref().map(Value::as_u64) {
                Some(Some(v)) if v <= bound => {}
                Some(Some(v)) => diags.push(Diagnostic::error(
                    format!("{path}.value"),
                    format!("value {v} exceeds bound {bound}"),
                )),
                _ => diags.push(Diagnostic::error(
                    format!("{path}.value"),
                    "integer-limit value must be a non-negative integer",
                )),
            },
        },
    }
}

fn validate_output_template(out: &OutputTemplate, path: &str, diags: &mut Vec<Diagnostic>) {
    if out.schema.is_empty() {
        diags.push(Diagnostic::error(format!("{path}.schema"), "schema must be non-empty"));
    }
    for (name, field) in &out.schema {
        if field.kind == ValueKind::Enum && field.values.as_ref().is_none_or(|v| v.is_empty()) {
            diags.push(Diagnostic::error(
                format!("{path}.schema.{name}.values"),
                "enum field needs a non-empty value set",
            ));
        }
    }
    for (i, r) in out.required.iter().enumerate() {
        if !out.schema.contains_key(r) {
            diags.push(Diagnostic::error(
                format!("{path}.required[{i}]"),
                format!("required field {r:?} is not in the schema"),
            ));
        }
    }
    if out.root.as_deref().is_some_and(|r| r.trim().is_empty()) {
        diags.push(Diagnostic::error(format!("{path}.root"), "root key must be non-empty"));
    }
}
