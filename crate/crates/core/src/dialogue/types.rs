use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One detected intent of the user's text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    #[serde(rename = "intent")]
    pub name: String,
    #[serde(rename = "type")]
    pub intent_type: String,
    pub probability: f64,
    pub subject: Option<String>,
    pub object: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupType {
    Noun,
    Verb,
}

/// Lemmatized words forming one named entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityGroup {
    pub words: Vec<String>,
    #[serde(rename = "type")]
    pub group_type: GroupType,
    #[serde(rename = "main word")]
    pub main_word: String,
}

/// Whether (and which) conclusion the question asks for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConclusionDirective {
    pub expected: bool,
    pub kind: Option<String>,
}

impl ConclusionDirective {
    pub fn none() -> Self {
        Self {
            expected: false,
            kind: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResultValue {
    /// Nothing relevant could be extracted.
    None,
    Value(Value),
}

impl ResultValue {
    pub fn is_none(&self) -> bool {
        matches!(self, ResultValue::None)
    }
}

/// Reserved intent name for derived conclusions.
pub const CONCLUSION_INTENT: &str = "conclusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentResult {
    pub intent: String,
    pub results: ResultValue,
}

impl IntentResult {
    pub fn new(intent: impl Into<String>, results: ResultValue) -> Self {
        Self {
            intent: intent.into(),
            results,
        }
    }
}
