//! Structured prompts: instantiation from templates, canonical rendering,
//! and parsing of model responses against output templates.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::meta_ontology::{
    Cardinality, FieldKind, OutputTemplate, PromptField, PromptTemplate, ValueKind,
    OUTPUT_TEMPLATE_KEY,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("missing binding {0:?}")]
    MissingBinding(String),
    #[error("illegal value for {key:?}: {value}")]
    IllegalValue { key: String, value: Value },
    #[error("{0:?} is not a binding field of the template")]
    UnknownBinding(String),
    #[error("prompt text is not a JSON object: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no structured payload found in response")]
pub struct NoStructuredPayload;

/// A concrete prompt ready to be rendered and sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub template_id: String,
    pub entries: Map<String, Value>,
    pub language: String,
}

impl StructuredPrompt {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn render(&self) -> String {
        render(self)
    }
}

/// Values supplied for a template's binding fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings(Map<String, Value>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.0.insert(key.into(), value.into());
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.0.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }
}

/// Builds a prompt from `template`: constants, bound values and defaults in
/// template field order, then the output template under
/// `"output representation template"`.
pub fn instantiate(
    template: &PromptTemplate,
    bindings: &Bindings,
) -> Result<StructuredPrompt, PromptError> {
    for key in bindings.keys() {
        match template.field(key) {
            Some(f) if f.kind == FieldKind::Binding => {}
            _ => return Err(PromptError::UnknownBinding(key.clone())),
        }
    }

    let mut entries = Map::new();
    for field in &template.fields {
        let value = match field.kind {
            FieldKind::Binding => match bindings.get(&field.key) {
                Some(v) => {
                    check_allowed(field, v)?;
                    Some(v.clone())
                }
                None if field.default.is_some() => field.default.clone(),
                None if field.required => {
                    return Err(PromptError::MissingBinding(field.key.clone()))
                }
                None => None,
            },
            FieldKind::AllowedValuesList => field.value.clone().or_else(|| field.default.clone()),
            FieldKind::Constant
            | FieldKind::BooleanFlag
            | FieldKind::IntegerLimit
            | FieldKind::NestedStructure => field.value.clone(),
        };
        if let Some(v) = value {
            check_field_value(field, &v)?;
            entries.insert(field.key.clone(), v);
        }
    }
    if let Some(out) = &template.output_template {
        entries.insert(OUTPUT_TEMPLATE_KEY.to_string(), out.representation());
    }

    let language = entries
        .get("language")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok(StructuredPrompt {
        template_id: template.id.clone(),
        entries,
        language,
    })
}

fn check_allowed(field: &PromptField, v: &Value) -> Result<(), PromptError> {
    match &field.allowed {
        Some(allowed) if field.kind == FieldKind::Binding && !allowed.contains(v) => {
            Err(PromptError::IllegalValue {
                key: field.key.clone(),
                value: v.clone(),
            })
        }
        _ => Ok(()),
    }
}

fn check_field_value(field: &PromptField, v: &Value) -> Result<(), PromptError> {
    let illegal = || PromptError::IllegalValue {
        key: field.key.clone(),
        value: v.clone(),
    };
    match field.kind {
        FieldKind::AllowedValuesList => {
            let allowed = field.allowed.as_deref().unwrap_or(&[]);
            match v {
                Value::Array(items) if items.iter().all(|i| allowed.contains(i)) => Ok(()),
                _ => Err(illegal()),
            }
        }
        FieldKind::IntegerLimit => match (v.as_u64(), field.bound) {
            (Some(n), Some(bound)) if n <= bound => Ok(()),
            (Some(_), None) => Ok(()),
            _ => Err(illegal()),
        },
        FieldKind::BooleanFlag if !v.is_boolean() => Err(illegal()),
        _ => Ok(()),
    }
}

/// Canonical wire text: entry order, 2-space indent, no trailing newline.
pub fn render(prompt: &StructuredPrompt) -> String {
    serde_json::to_string_pretty(&prompt.entries).expect("JSON values always serialize")
}

/// Parses rendered prompt text back into entries without template checks.
pub fn parse_prompt_entries(text: &str) -> Result<Map<String, Value>, PromptError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(other) => Err(PromptError::Parse(format!(
            "expected an object, found {}",
            kind_name(&other)
        ))),
        Err(e) => Err(PromptError::Parse(e.to_string())),
    }
}

/// Parses rendered prompt text and checks it against `template`.
pub fn parse_prompt(text: &str, template: &PromptTemplate) -> Result<StructuredPrompt, PromptError> {
    let entries = parse_prompt_entries(text)?;
    for field in &template.fields {
        match entries.get(&field.key) {
            Some(v) => {
                check_allowed(field, v)?;
                check_field_value(field, v)?;
            }
            None if field.kind == FieldKind::Binding && field.required => {
                return Err(PromptError::MissingBinding(field.key.clone()))
            }
            None => {}
        }
    }
    let language = entries
        .get("language")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok(StructuredPrompt {
        template_id: template.id.clone(),
        entries,
        language,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    /// The model answered with the bare token `None`.
    NoneMarker,
    Value(Value),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub payload: Payload,
    pub violations: Vec<Violation>,
}

impl ParsedResponse {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Returns true when `raw` is the bare `None` token, allowing for code
/// fences, quotes and a trailing period around it.
pub fn is_none_token(raw: &str) -> bool {
    let mut s = raw.trim();
    if let Some(rest) = s.strip_prefix("```") {
        let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        s = rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    let s = s.trim_end_matches('.').trim();
    let s = s
        .strip_prefix('"')
        .and_then(|x| x.strip_suffix('"'))
        .or_else(|| s.strip_prefix('\'').and_then(|x| x.strip_suffix('\'')))
        .unwrap_or(s);
    s.trim().eq_ignore_ascii_case("none")
}

/// Finds the first balanced `{...}` or `[...]` region of `raw` that parses
/// as JSON.
pub fn extract_structured(raw: &str) -> Option<Value> {
    let trimmed = raw.trim();
    if trimmed.starts_with(['{', '[']) {
        if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
            return Some(v);
        }
    }
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(off) = raw[start..].find(['{', '[']) {
        let begin = start + off;
        if let Some(end) = balanced_end(bytes, begin) {
            if let Ok(v) = serde_json::from_str::<Value>(&raw[begin..=end]) {
                return Some(v);
            }
        }
        start = begin + 1;
    }
    None
}

// Index of the bracket closing the one at `begin`, honouring JSON strings.
fn balanced_end(bytes: &[u8], begin: usize) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(begin) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Extracts the payload from a completion and checks it against `out`.
pub fn parse_response(raw: &str, out: &OutputTemplate) -> Result<ParsedResponse, NoStructuredPayload> {
    if is_none_token(raw) {
        return Ok(ParsedResponse {
            payload: Payload::NoneMarker,
            violations: Vec::new(),
        });
    }
    let mut value = extract_structured(raw).ok_or(NoStructuredPayload)?;
    if let (Some(root), Value::Object(m)) = (&out.root, &value) {
        if let Some(inner) = m.get(root) {
            value = inner.clone();
        }
    }
    let base = out.root.clone().unwrap_or_else(|| "$".into());
    let mut violations = Vec::new();
    match out.cardinality {
        Cardinality::Many => match &value {
            Value::Array(items) => {
                for (i, item) in items.iter().enumerate() {
                    check_record(item, out, &format!("{base}[{i}]"), &mut violations);
                }
            }
            other => violations.push(Violation {
                path: base,
                message: format!("expected a list of records, found {}", kind_name(other)),
            }),
        },
        Cardinality::One => {
            let prefix = out.root.as_ref().map(|r| format!("{r}."));
            check_record_fields(&value, out, prefix.as_deref().unwrap_or(""), &mut violations);
        }
    }
    Ok(ParsedResponse {
        payload: Payload::Value(value),
        violations,
    })
}

fn check_record(item: &Value, out: &OutputTemplate, path: &str, violations: &mut Vec<Violation>) {
    check_record_fields(item, out, &format!("{path}."), violations)
}

fn check_record_fields(
    item: &Value,
    out: &OutputTemplate,
    prefix: &str,
    violations: &mut Vec<Violation>,
) {
    let Value::Object(record) = item else {
        violations.push(Violation {
            path: prefix.trim_end_matches('.').to_string(),
            message: format!("expected a record, found {}", kind_name(item)),
        });
        return;
    };
    for name in &out.required {
        if !record.contains_key(name) {
            violations.push(Violation {
                path: format!("{prefix}{name}"),
                message: "missing required field".into(),
            });
        }
    }
    for (name, spec) in &out.schema {
        let Some(v) = record.get(name) else { continue };
        if let Some(message) = kind_mismatch(spec.kind, spec.values.as_deref(), v) {
            violations.push(Violation {
                path: format!("{prefix}{name}"),
                message,
            });
        }
    }
}

fn kind_mismatch(kind: ValueKind, values: Option<&[String]>, v: &Value) -> Option<String> {
    let found = kind_name(v);
    match kind {
        ValueKind::String if !v.is_string() => Some(format!("expected a string, found {found}")),
        ValueKind::NullableString if !(v.is_string() || v.is_null()) => {
            Some(format!("expected a string or null, found {found}"))
        }
        ValueKind::FloatInUnitInterval => match v.as_f64() {
            Some(p) if (0.0..=1.0).contains(&p) => None,
            Some(p) => Some(format!("value {p} is outside [0, 1]")),
            None => Some(format!("expected a number, found {found}")),
        },
        ValueKind::Enum => match v.as_str() {
            Some(s) if values.unwrap_or(&[]).iter().any(|a| a == s) => None,
            Some(s) => Some(format!("{s:?} is not an allowed value")),
            None => Some(format!("expected one of the allowed strings, found {found}")),
        },
        ValueKind::List if !v.is_array() => Some(format!("expected a list, found {found}")),
        ValueKind::Object if !v.is_object() => Some(format!("expected an object, found {found}")),
        ValueKind::Boolean if !v.is_boolean() => Some(format!("expected a boolean, found {found}")),
        _ => None,
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "object",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_ontology::{MetaOntology, Purpose};
    use serde_json::json;

    fn onto() -> MetaOntology {
        crate::fixtures::meta_ontology()
    }

    fn intent_template(o: &MetaOntology) -> &PromptTemplate {
        o.lookup_template(Purpose::IntentDetection, None).unwrap()
    }

    #[test]
    fn intent_prompt_matches_worked_example_structure() {
        let o = onto();
        let b = Bindings::new()
            .with("text", "На що повинна спиратися ФРМ?")
            .with("language", "Ukrainian");
        let p = instantiate(intent_template(&o), &b).unwrap();
        let keys: Vec<&str> = p.entries.keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            [
                "information to provide",
                "text",
                "language",
                "input information field",
                "possible intents",
                "several intents",
                "intents probability",
                "show intent subject",
                "max intents number",
                "intents arrange",
                "output format",
                "output representation template",
            ]
        );
        assert_eq!(p.get("possible intents").unwrap().as_array().unwrap().len(), 16);
        assert_eq!(p.get("max intents number"), Some(&json!(4)));
        assert_eq!(p.get("intents arrange"), Some(&json!("by probability")));
        assert_eq!(p.get("several intents"), Some(&json!(true)));
        assert_eq!(p.language, "Ukrainian");
    }

    #[test]
    fn missing_required_binding() {
        let o = onto();
        let err = instantiate(intent_template(&o), &Bindings::new()).unwrap_err();
        assert_eq!(err, PromptError::MissingBinding("text".into()));
    }

    #[test]
    fn unknown_binding_rejected() {
        let o = onto();
        let b = Bindings::new().with("text", "x").with("max intents number", 9);
        assert_eq!(
            instantiate(intent_template(&o), &b).unwrap_err(),
            PromptError::UnknownBinding("max intents number".into())
        );
    }

    #[test]
    fn binding_outside_allowed_set_is_illegal() {
        let mut t = intent_template(&onto()).clone();
        let lang = t.fields.iter_mut().find(|f| f.key == "language").unwrap();
        lang.allowed = Some(vec![json!("Ukrainian"), json!("English")]);
        let b = Bindings::new().with("text", "x").with("language", "Klingon");
        assert!(matches!(
            instantiate(&t, &b),
            Err(PromptError::IllegalValue { key, .. }) if key == "language"
        ));
    }

    #[test]
    fn constants_only_template_is_identity() {
        let t = PromptTemplate {
            id: "c".into(),
            purpose: Purpose::ResultFormatting,
            default: true,
            applicable_intents: vec![],
            fields: vec![
                PromptField::constant("a", json!("x")),
                PromptField::constant("b", json!([1, 2])),
            ],
            output_template: None,
            notes: String::new(),
        };
        let p = instantiate(&t, &Bindings::new()).unwrap();
        assert_eq!(Value::Object(p.entries), json!({"a": "x", "b": [1, 2]}));
    }

    #[test]
    fn single_key_canonical_form() {
        let mut entries = Map::new();
        entries.insert("language".into(), json!("Ukrainian"));
        let p = StructuredPrompt {
            template_id: "t".into(),
            entries,
            language: "Ukrainian".into(),
        };
        assert_eq!(render(&p), "{\n  \"language\": \"Ukrainian\"\n}");
    }

    #[test]
    fn rendered_prompt_reparses_structurally_equal() {
        let o = onto();
        let t = intent_template(&o);
        let p = instantiate(t, &Bindings::new().with("text", "На що повинна спиратися ФРМ?")).unwrap();
        let text = render(&p);
        assert!(!text.lines().any(|l| l.ends_with(' ')));
        let back = parse_prompt(&text, t).unwrap();
        assert_eq!(back, p);
        assert_eq!(render(&back), text);
    }

    #[test]
    fn parse_prompt_enforces_limits() {
        let o = onto();
        let t = intent_template(&o);
        let p = instantiate(t, &Bindings::new().with("text", "q")).unwrap();
        let text = render(&p).replace("\"max intents number\": 4", "\"max intents number\": 40");
        assert!(matches!(parse_prompt(&text, t), Err(PromptError::IllegalValue { .. })));
        let text = render(&p).replace("\"text\": \"q\",\n", "");
        assert_eq!(
            parse_prompt(&text, t).unwrap_err(),
            PromptError::MissingBinding("text".into())
        );
    }

    const INTENT_RESPONSE: &str = r#"[
  {"intent": "subject", "type": "interrogation", "probability": 0.8, "subject": "ФРМ", "object": null},
  {"intent": "cause", "type": "narration", "probability": 0.6, "subject": "ФРМ", "object": "спиратися"},
  {"intent": "way of doing", "type": "interrogation", "probability": 0.4, "subject": null, "object": "спиратися"}
]"#;

    fn intent_out() -> OutputTemplate {
        intent_template(&onto()).output_template.clone().unwrap()
    }

    #[test]
    fn worked_example_response_validates() {
        let r = parse_response(INTENT_RESPONSE, &intent_out()).unwrap();
        assert!(r.is_valid(), "{:?}", r.violations);
        match r.payload {
            Payload::Value(Value::Array(items)) => assert_eq!(items.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn response_wrapped_in_prose_and_fences() {
        let raw = format!("Sure! Here is the result:\n```json\n{{\"result\": {INTENT_RESPONSE}}}\n```\nHope it helps [1].");
        let r = parse_response(&raw, &intent_out()).unwrap();
        assert!(r.is_valid());
        assert_eq!(r.payload, Payload::Value(serde_json::from_str(INTENT_RESPONSE).unwrap()));
    }

    #[test]
    fn none_token_variants() {
        for raw in ["None", "none", " NONE\n", "\"None\"", "None.", "```\nNone\n```"] {
            let r = parse_response(raw, &intent_out()).unwrap();
            assert_eq!(r.payload, Payload::NoneMarker, "{raw:?}");
            assert!(r.violations.is_empty());
        }
        assert!(!is_none_token("None of the contexts"));
    }

    #[test]
    fn probability_out_of_range_is_violation() {
        let raw = r#"[{"intent": "cause", "type": "narration", "probability": 1.7}]"#;
        let r = parse_response(raw, &intent_out()).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].path, "result[0].probability");
    }

    #[test]
    fn probability_bounds_are_closed() {
        for (p, ok) in [(0.0, true), (1.0, true), (-0.0001, false), (1.0001, false)] {
            let raw = format!(r#"[{{"intent": "cause", "type": "narration", "probability": {p}}}]"#);
            let r = parse_response(&raw, &intent_out()).unwrap();
            assert_eq!(r.is_valid(), ok, "{p}");
        }
    }

    #[test]
    fn missing_required_field_is_violation() {
        let raw = r#"[{"intent": "cause", "probability": 0.5}]"#;
        let r = parse_response(raw, &intent_out()).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].path, "result[0].type");
    }

    #[test]
    fn no_payload() {
        assert_eq!(parse_response("I cannot help", &intent_out()), Err(NoStructuredPayload));
        assert_eq!(parse_response("{broken", &intent_out()), Err(NoStructuredPayload));
        assert_eq!(parse_response("", &intent_out()), Err(NoStructuredPayload));
    }

    #[test]
    fn skips_unparseable_bracket_regions() {
        let raw = r#"see [note] and {"expected": true, "kind": "x"}"#;
        assert_eq!(extract_structured(raw), Some(json!({"expected": true, "kind": "x"})));
        let raw = r#"{"a": "}{ [", "b": [1, {"c": "]"}]}"#;
        assert_eq!(extract_structured(raw).unwrap()["b"][1]["c"], json!("]"));
    }

    #[test]
    fn single_record_templates() {
        let o = onto();
        let out = o
            .lookup_template(Purpose::ConclusionDetection, None)
            .unwrap()
            .output_template
            .clone()
            .unwrap();
        let r = parse_response(r#"{"expected": false}"#, &out).unwrap();
        assert!(r.is_valid());
        let r = parse_response(r#"{"expected": "no"}"#, &out).unwrap();
        assert_eq!(r.violations[0].path, "expected");
        let r = parse_response(r#"[{"expected": true}]"#, &out).unwrap();
        assert_eq!(r.violations.len(), 1);
    }
}
