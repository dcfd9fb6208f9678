//! Subject-area contexts bound to named entities, and context selection.
//!
//! Selection scores each context against the extracted entity groups and
//! intents:
//!
//! * per entity group: 2 if its main word matches a binding lemma, else 1 if
//!   any of its words does;
//! * per intent: 1 if its subject or object matches a binding lemma.
//!
//! Matching is exact equality of case-folded strings. The inverted index only
//! narrows the candidate set; scores are identical to scoring every context.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{EntityGroup, Intent};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityBinding {
    pub lemmas: Vec<String>,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub id: String,
    pub text: String,
    pub language: String,
    pub bindings: Vec<EntityBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<Sentiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ContextEntry {
    fn lemmas(&self) -> impl Iterator<Item = &String> {
        self.bindings.iter().flat_map(|b| b.lemmas.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedContext {
    pub context_id: String,
    pub score: u32,
    pub matched_lemmas: Vec<String>,
}

/// Ranked contexts; scores non-increasing and all positive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextSelection(pub Vec<SelectedContext>);

impl ContextSelection {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SelectedContext> {
        self.0.iter()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ContextDocument {
    contexts: Vec<ContextEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct ContextStore {
    entries: Vec<ContextEntry>,
    // case-folded lemma -> indices into `entries`, ascending
    index: HashMap<String, Vec<usize>>,
}

pub fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn load_contexts(document: &str) -> Result<ContextStore, ContextError> {
    let doc: ContextDocument =
        serde_json::from_str(document).map_err(|e| ContextError::Parse(e.to_string()))?;
    ContextStore::new(doc.contexts)
}

impl ContextStore {
    pub fn new(entries: Vec<ContextEntry>) -> Result<Self, ContextError> {
        let mut seen = BTreeSet::new();
        for (i, c) in entries.iter().enumerate() {
            let path = format!("contexts[{i}]");
            if c.id.trim().is_empty() {
                return Err(schema(format!("{path}.id"), "context id must be non-empty"));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(schema(format!("{path}.id"), format!("duplicate context id {:?}", c.id)));
            }
            if c.text.trim().is_empty() {
                return Err(schema(format!("{path}.text"), "context text must be non-empty"));
            }
            for (j, b) in c.bindings.iter().enumerate() {
                if b.lemmas.is_empty() {
                    return Err(schema(
                        format!("{path}.bindings[{j}].lemmas"),
                        "binding needs at least one lemma",
                    ));
                }
                if let Some(k) = b.lemmas.iter().position(|l| l.trim().is_empty()) {
                    return Err(schema(
                        format!("{path}.bindings[{j}].lemmas[{k}]"),
                        "lemma must be non-empty",
                    ));
                }
            }
        }

        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, c) in entries.iter().enumerate() {
            for lemma in c.lemmas() {
                let postings = index.entry(fold(lemma)).or_default();
                if postings.last() != Some(&i) {
                    postings.push(i);
                }
            }
        }
        Ok(Self { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ContextEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&ContextEntry> {
        self.entries.iter().find(|c| c.id == id)
    }

    /// Serializes the store back to its document form.
    pub fn to_document(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            contexts: &'a [ContextEntry],
        }
        serde_json::to_string_pretty(&Doc {
            contexts: &self.entries,
        })
        .expect("contexts always serialize")
    }

    fn postings(&self, term: &str) -> &[usize] {
        self.index.get(&fold(term)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn select_contexts(
        &self,
        entities: &[EntityGroup],
        intents: &[Intent],
        k: usize,
        sentiment_filter: Option<Sentiment>,
    ) -> ContextSelection {
        assert!(k >= 1, "k must be at least 1");
        let mut scores: BTreeMap<usize, u32> = BTreeMap::new();
        let mut matched: HashMap<usize, BTreeSet<String>> = HashMap::new();

        for group in entities {
            let mut hits: HashMap<usize, u32> = HashMap::new();
            for word in &group.words {
                for &i in self.postings(word) {
                    hits.entry(i).or_insert(1);
                    matched.entry(i).or_default().insert(fold(word));
                }
            }
            for &i in self.postings(&group.main_word) {
                hits.insert(i, 2);
                matched.entry(i).or_default().insert(fold(&group.main_word));
            }
            for (i, s) in hits {
                *scores.entry(i).or_default() += s;
            }
        }

        for intent in intents {
            let mut hits = BTreeSet::new();
            for term in [&intent.subject, &intent.object].into_iter().flatten() {
                for &i in self.postings(term) {
                    hits.insert(i);
                    matched.entry(i).or_default().insert(fold(term));
                }
            }
            for i in hits {
                *scores.entry(i).or_default() += 1;
            }
        }

        let mut ranked: Vec<SelectedContext> = scores
            .into_iter()
            .filter(|&(_, s)| s > 0)
            .map(|(i, score)| (&self.entries[i], score, matched.remove(&i).unwrap_or_default()))
            .filter(|(c, _, _)| sentiment_filter.is_none_or(|want| c.sentiment == Some(want)))
            .map(|(c, score, folded)| SelectedContext {
                context_id: c.id.clone(),
                score,
                matched_lemmas: original_lemmas(c, &folded),
            })
            .collect();
        ranked.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.context_id.cmp(&b.context_id)));
        ranked.truncate(k);
        ContextSelection(ranked)
    }

    /// Texts of the selected contexts, in selection order.
    pub fn texts(&self, selection: &ContextSelection) -> Vec<String> {
        selection
            .iter()
            .filter_map(|s| self.get(&s.context_id))
            .map(|c| c.text.clone())
            .collect()
    }
}

// Binding lemmas (as written in the context) whose folded form was matched,
// in binding order, without duplicates.
fn original_lemmas(c: &ContextEntry, folded: &BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut used = BTreeSet::new();
    for lemma in c.lemmas() {
        let f = fold(lemma);
        if folded.contains(&f) && used.insert(f) {
            out.push(lemma.clone());
        }
    }
    out
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ContextError {
    ContextError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

pub fn select_contexts(
    store: &ContextStore,
    entities: &[EntityGroup],
    intents: &[Intent],
    k: usize,
    sentiment_filter: Option<Sentiment>,
) -> ContextSelection {
    store.select_contexts(entities, intents, k, sentiment_filter)
}
