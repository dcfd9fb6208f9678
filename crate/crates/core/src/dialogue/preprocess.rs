use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessRules {
    pub normalize_unicode: bool,
    pub collapse_whitespace: bool,
    pub strip_control: bool,
    pub max_length: usize,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        Self {
            normalize_unicode: true,
            collapse_whitespace: true,
            strip_control: true,
            max_length: 10_000,
        }
    }
}

impl PreprocessRules {
    pub fn identity(max_length: usize) -> Self {
        Self {
            normalize_unicode: false,
            collapse_whitespace: false,
            strip_control: false,
            max_length,
        }
    }
}

/// Cleans raw user text: NFC normalization, control-character removal,
/// whitespace collapsing, trimming and truncation to `max_length` chars.
pub fn preprocess(text: &str, rules: &PreprocessRules) -> Result<String, PipelineError> {
    if text.trim().is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let mut s: String = if rules.normalize_unicode {
        text.nfc().collect()
    } else {
        text.to_string()
    };
    if rules.strip_control {
        // whitespace controls are left to the collapsing step
        s.retain(|c| !c.is_control() || c.is_whitespace());
    }
    if rules.collapse_whitespace {
        s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    let s = s.trim();
    let out: String = match s.char_indices().nth(rules.max_length.max(1)) {
        Some((i, _)) => s[..i].trim_end().to_string(),
        None => s.to_string(),
    };
    if out.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    Ok(out)
}
