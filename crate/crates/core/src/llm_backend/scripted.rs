use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{check_request, BackendError, ChatMessage, CompletionParams, LlmBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matcher {
    ExactPrompt,
    TemplateId,
    Substring,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub pattern: String,
    pub response: String,
}

#[derive(Debug, Deserialize)]
struct ScriptDocument {
    entries: Vec<ScriptEntry>,
}

/// Answers prompts from a fixed script.
///
/// Entries are tried by matcher class (exact prompt, then template id, then
/// substring), and in declaration order within a class. The prompt is the
/// content of the last message.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    calls: Mutex<Vec<String>>,
}

pub fn load_script(document: &str) -> Result<ScriptedBackend, String> {
    let doc: ScriptDocument = serde_json::from_str(document).map_err(|e| e.to_string())?;
    if let Some(i) = doc.entries.iter().position(|e| e.pattern.is_empty()) {
        return Err(format!("entries[{i}].pattern must be non-empty"));
    }
    Ok(ScriptedBackend::new(doc.entries))
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    /// Prompts received so far, in arrival order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn lookup(&self, prompt: &str, template_id: Option<&str>) -> Option<&str> {
        let find = |m: Matcher, hit: &dyn Fn(&str) -> bool| {
            self.entries
                .iter()
                .find(|e| e.matcher == m && hit(&e.pattern))
                .map(|e| e.response.as_str())
        };
        find(Matcher::ExactPrompt, &|p| p == prompt)
            .or_else(|| find(Matcher::TemplateId, &|p| Some(p) == template_id))
            .or_else(|| find(Matcher::Substring, &|p| prompt.contains(p)))
    }
}

#[async_trait]
impl LlmBackend for ScriptedBackend {
    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        check_request(messages, params)?;
        let prompt = &messages[messages.len() - 1].content;
        self.calls.lock().unwrap().push(prompt.clone());
        self.lookup(prompt, params.template_id.as_deref())
            .map(str::to_string)
            .ok_or_else(|| BackendError::Unavailable("no script entry".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(matcher: Matcher, pattern: &str, response: &str) -> ScriptEntry {
        ScriptEntry {
            matcher,
            pattern: pattern.into(),
            response: response.into(),
        }
    }

    async fn ask(b: &ScriptedBackend, prompt: &str, template: Option<&str>) -> Result<String, BackendError> {
        let params = CompletionParams {
            template_id: template.map(str::to_string),
            ..Default::default()
        };
        b.complete(&[ChatMessage::user(prompt)], &params).await
    }

    #[tokio::test]
    async fn precedence_exact_then_template_then_substring() {
        let b = ScriptedBackend::new(vec![
            entry(Matcher::Substring, "hello", "sub"),
            entry(Matcher::TemplateId, "t1", "tpl"),
            entry(Matcher::ExactPrompt, "hello world", "exact"),
        ]);
        assert_eq!(ask(&b, "hello world", Some("t1")).await.unwrap(), "exact");
        assert_eq!(ask(&b, "hello there", Some("t1")).await.unwrap(), "tpl");
        assert_eq!(ask(&b, "hello there", None).await.unwrap(), "sub");
        assert_eq!(b.call_count(), 3);
    }

    #[tokio::test]
    async fn duplicate_exact_first_wins() {
        let b = ScriptedBackend::new(vec![
            entry(Matcher::ExactPrompt, "q", "first"),
            entry(Matcher::ExactPrompt, "q", "second"),
        ]);
        assert_eq!(ask(&b, "q", None).await.unwrap(), "first");
    }

    #[tokio::test]
    async fn unmatched_and_empty_script() {
        let b = load_script(r#"{"entries": []}"#).unwrap();
        let err = ask(&b, "anything", None).await.unwrap_err();
        assert_eq!(err, BackendError::Unavailable("no script entry".into()));
    }

    #[test]
    fn load_errors() {
        assert!(load_script("").is_err());
        assert!(load_script(r#"{"entries": [{"matcher": "regex", "pattern": "x", "response": "y"}]}"#).is_err());
        assert!(load_script(r#"{"entries": [{"matcher": "substring", "pattern": "", "response": "y"}]}"#).is_err());
    }

    #[test]
    fn golden_script_has_five_entries() {
        let b = load_script(crate::fixtures::SCRIPT).unwrap();
        assert_eq!(b.entries().len(), 5);
    }
}
