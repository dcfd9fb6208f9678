//! Final answer rendering (RES-FORM).

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::types::{IntentResult, ResultValue};
use crate::meta_ontology::{MetaOntology, PromptTemplate, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderKind {
    PlainText,
    Number,
    Date,
    List,
    Table,
    Link,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedAnswer {
    pub intent: String,
    pub kind: RenderKind,
    pub rendered: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerStatus {
    Answered,
    NoInformation,
    NoRelevantContexts,
}

/// What the user gets back from a dialogue act.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerDocument {
    pub status: AnswerStatus,
    pub answers: Vec<RenderedAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Rendering rules read from the result-formatting template's constants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderingRules {
    pub list_item_prefix: String,
    pub link_format: String,
    pub date_format: String,
    pub none_text: String,
    pub no_contexts_text: String,
}

impl Default for RenderingRules {
    fn default() -> Self {
        Self {
            list_item_prefix: "- ".into(),
            link_format: "<{}>".into(),
            date_format: "{}".into(),
            none_text: "no information available".into(),
            no_contexts_text: "no relevant contexts found".into(),
        }
    }
}

impl RenderingRules {
    pub fn from_template(t: &PromptTemplate) -> Self {
        let d = Self::default();
        let get = |key: &str, fallback: String| {
            t.field(key)
                .and_then(|f| f.value.as_ref())
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or(fallback)
        };
        Self {
            list_item_prefix: get("list item prefix", d.list_item_prefix),
            link_format: get("link format", d.link_format),
            date_format: get("date format", d.date_format),
            none_text: get("none text", d.none_text),
            no_contexts_text: get("no contexts text", d.no_contexts_text),
        }
    }

    pub fn from_ontology(onto: &MetaOntology) -> Self {
        onto.lookup_template(Purpose::ResultFormatting, None)
            .map(Self::from_template)
            .unwrap_or_default()
    }

    pub fn render(&self, value: &Value) -> (RenderKind, String) {
        match value {
            Value::Null => (RenderKind::None, self.none_text.clone()),
            Value::Bool(b) => (RenderKind::PlainText, b.to_string()),
            Value::Number(n) => (RenderKind::Number, n.to_string()),
            Value::String(s) => self.render_text(s),
            Value::Array(items) if items.is_empty() => (RenderKind::None, self.none_text.clone()),
            Value::Array(items) => match table_rows(items) {
                Some((header, rows)) => (RenderKind::Table, render_table(header.as_deref(), &rows)),
                None => {
                    let lines: Vec<String> = items
                        .iter()
                        .map(|i| format!("{}{}", self.list_item_prefix, cell(i)))
                        .collect();
                    (RenderKind::List, lines.join("\n"))
                }
            },
            Value::Object(m) => {
                let rows: Vec<Vec<String>> =
                    m.iter().map(|(k, v)| vec![k.clone(), cell(v)]).collect();
                (RenderKind::Table, render_table(None, &rows))
            }
        }
    }

    fn render_text(&self, s: &str) -> (RenderKind, String) {
        let t = s.trim();
        if t.starts_with("http://") || t.starts_with("https://") {
            (RenderKind::Link, self.link_format.replace("{}", t))
        } else if is_iso_date(t) {
            (RenderKind::Date, self.date_format.replace("{}", t))
        } else if !t.is_empty() && t.parse::<f64>().is_ok_and(f64::is_finite) {
            (RenderKind::Number, t.to_string())
        } else {
            (RenderKind::PlainText, s.to_string())
        }
    }
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter()
            .enumerate()
            .all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

// A list renders as a table when every item is a 2-element list, or every
// item is a record with the same keys.
type Table = (Option<Vec<String>>, Vec<Vec<String>>);

fn table_rows(items: &[Value]) -> Option<Table> {
    if items.iter().all(|i| i.as_array().is_some_and(|a| a.len() == 2)) {
        let rows = items
            .iter()
            .map(|i| i.as_array().unwrap().iter().map(cell).collect())
            .collect();
        return Some((None, rows));
    }
    let first = items.first()?.as_object()?;
    if first.is_empty() {
        return None;
    }
    let header: Vec<String> = first.keys().cloned().collect();
    let uniform = items.iter().all(|i| {
        i.as_object()
            .is_some_and(|m| m.len() == header.len() && header.iter().all(|k| m.contains_key(k)))
    });
    if !uniform {
        return None;
    }
    let rows = items
        .iter()
        .map(|i| {
            let m = i.as_object().unwrap();
            header.iter().map(|k| cell(&m[k])).collect()
        })
        .collect();
    Some((Some(header), rows))
}

fn render_table(header: Option<&[String]>, rows: &[Vec<String>]) -> String {
    let line = |cells: &[String]| {
        let escaped: Vec<String> = cells.iter().map(|c| c.replace('|', "\\|")).collect();
        format!("| {} |", escaped.join(" | "))
    };
    let mut out = Vec::new();
    if let Some(h) = header {
        out.push(line(h));
        out.push(line(&vec!["---".to_string(); h.len()]));
    }
    out.extend(rows.iter().map(|r| line(r)));
    out.join("\n")
}

/// Renders intent results in the order given. When nothing carries
/// information the document is a single "no information" answer.
pub fn format_results(parts: &[IntentResult], onto: &MetaOntology) -> AnswerDocument {
    format_with(parts, &RenderingRules::from_ontology(onto))
}

pub fn format_with(parts: &[IntentResult], rules: &RenderingRules) -> AnswerDocument {
    if parts.iter().all(|p| p.results.is_none()) {
        return AnswerDocument {
            status: AnswerStatus::NoInformation,
            answers: Vec::new(),
            message: Some(rules.none_text.clone()),
        };
    }
    let answers = parts
        .iter()
        .map(|p| {
            let (kind, rendered) = match &p.results {
                ResultValue::None => (RenderKind::None, rules.none_text.clone()),
                ResultValue::Value(v) => rules.render(v),
            };
            RenderedAnswer {
                intent: p.intent.clone(),
                kind,
                rendered,
            }
        })
        .collect();
    AnswerDocument {
        status: AnswerStatus::Answered,
        answers,
        message: None,
    }
}

/// Answer for an act that found no relevant contexts.
pub fn no_contexts_answer(rules: &RenderingRules) -> AnswerDocument {
    AnswerDocument {
        status: AnswerStatus::NoRelevantContexts,
        answers: Vec::new(),
        message: Some(rules.no_contexts_text.clone()),
    }
}
