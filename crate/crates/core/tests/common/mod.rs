//! Fixtures, generators and independent oracles shared by the integration
//! tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use ontoprompt_core::context_store::{
    load_contexts, ContextEntry, ContextStore, EntityBinding, SelectedContext, Sentiment,
};
use ontoprompt_core::dialogue::{DialogueEngine, EntityGroup, GroupType, Intent, PipelineConfig};
use ontoprompt_core::llm_backend::{load_script, ScriptedBackend};
use ontoprompt_core::meta_ontology::{
    load_meta_ontology, Cardinality, FieldKind, MetaOntology, OutputFormat, OutputTemplate,
    PromptField, PromptTemplate, Purpose, SchemaField, ValueKind,
};
use ontoprompt_core::prompt_engine::Bindings;
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

pub const QUESTION: &str = "На що повинна спиратися ФРМ?";

pub fn fixture(name: &str) -> String {
    let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn onto() -> MetaOntology {
    load_meta_ontology(&fixture("meta.json")).unwrap()
}

pub fn toy_store() -> ContextStore {
    load_contexts(&fixture("toy_ctx.json")).unwrap()
}

pub fn golden_backend() -> Arc<ScriptedBackend> {
    Arc::new(load_script(&fixture("script.json")).unwrap())
}

pub fn engine_with(onto: Arc<MetaOntology>, backend: Arc<ScriptedBackend>) -> DialogueEngine {
    DialogueEngine::new(onto, Arc::new(toy_store()), backend, PipelineConfig::default())
}

pub fn golden_engine() -> (DialogueEngine, Arc<ScriptedBackend>) {
    let backend = golden_backend();
    (engine_with(Arc::new(onto()), backend.clone()), backend)
}

pub fn reference_intents() -> Vec<Intent> {
    let i = |name: &str, ty: &str, p: f64, s: Option<&str>, o: Option<&str>| Intent {
        name: name.into(),
        intent_type: ty.into(),
        probability: p,
        subject: s.map(Into::into),
        object: o.map(Into::into),
    };
    vec![
        i("subject", "interrogation", 0.8, Some("ФРМ"), None),
        i("cause", "narration", 0.6, Some("ФРМ"), Some("спиратися")),
        i("way of doing", "interrogation", 0.4, None, Some("спиратися")),
    ]
}

pub fn reference_entities() -> Vec<EntityGroup> {
    vec![
        EntityGroup {
            words: vec!["ФРМ".into()],
            group_type: GroupType::Noun,
            main_word: "ФРМ".into(),
        },
        EntityGroup {
            words: vec!["повинна".into(), "спиратися".into()],
            group_type: GroupType::Verb,
            main_word: "спиратися".into(),
        },
    ]
}

// ---- context selection oracle ----

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Scores every context directly from the written rule, with no index.
pub fn oracle_select(
    entries: &[ContextEntry],
    entities: &[EntityGroup],
    intents: &[Intent],
    k: usize,
    filter: Option<Sentiment>,
) -> Vec<SelectedContext> {
    let mut out = Vec::new();
    for c in entries {
        if filter.is_some_and(|f| c.sentiment != Some(f)) {
            continue;
        }
        let lemmas: Vec<&String> = c.bindings.iter().flat_map(|b| &b.lemmas).collect();
        let has = |w: &str| lemmas.iter().any(|l| fold(l) == fold(w));
        let mut score = 0;
        let mut terms: Vec<&str> = Vec::new();
        for g in entities {
            if has(&g.main_word) {
                score += 2;
            } else if g.words.iter().any(|w| has(w)) {
                score += 1;
            }
            terms.push(&g.main_word);
            terms.extend(g.words.iter().map(String::as_str));
        }
        for i in intents {
            let hit = [&i.subject, &i.object]
                .into_iter()
                .flatten()
                .any(|t| has(t));
            if hit {
                score += 1;
            }
            terms.extend([&i.subject, &i.object].into_iter().flatten().map(String::as_str));
        }
        if score == 0 {
            continue;
        }
        let mut seen = BTreeSet::new();
        let matched = lemmas
            .iter()
            .filter(|l| terms.iter().any(|t| fold(t) == fold(l)))
            .filter(|l| seen.insert(fold(l)))
            .map(|l| l.to_string())
            .collect();
        out.push(SelectedContext {
            context_id: c.id.clone(),
            score,
            matched_lemmas: matched,
        });
    }
    out.sort_by(|a, b| b.score.cmp(&a.score).then(a.context_id.cmp(&b.context_id)));
    out.truncate(k);
    out
}

const LEMMAS: &[&str] = &[
    "ФРМ", "фрм", "МКФ", "модель", "спиратися", "повинна", "спорт", "травма", "PRM", "prm",
    "team", "Goal", "goal", "рух", " Рух ", "ICF",
];

fn lemma(rng: &mut StdRng) -> String {
    LEMMAS.choose(rng).unwrap().to_string()
}

fn lemmas(rng: &mut StdRng, max: usize) -> Vec<String> {
    (0..rng.random_range(1..=max)).map(|_| lemma(rng)).collect()
}

const SENTIMENTS: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

pub fn random_store(rng: &mut StdRng, max: usize) -> Vec<ContextEntry> {
    let n = rng.random_range(0..=max);
    let mut ids: Vec<usize> = (0..n).collect();
    // shuffle so id order differs from insertion order
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    ids.into_iter()
        .map(|i| ContextEntry {
            id: format!("c{i:02}"),
            text: format!("passage {i}"),
            language: "Ukrainian".into(),
            bindings: (0..rng.random_range(1..=3))
                .map(|_| EntityBinding {
                    lemmas: lemmas(rng, 3),
                    role: "topic".into(),
                })
                .collect(),
            sentiment: rng.random_bool(0.7).then(|| *SENTIMENTS.choose(rng).unwrap()),
            source: None,
        })
        .collect()
}

pub struct Query {
    pub entities: Vec<EntityGroup>,
    pub intents: Vec<Intent>,
    pub k: usize,
    pub filter: Option<Sentiment>,
}

pub fn random_query(rng: &mut StdRng) -> Query {
    let entities = (0..rng.random_range(0..=3))
        .map(|_| {
            let words = lemmas(rng, 3);
            let main_word = if rng.random_bool(0.8) {
                words.choose(rng).unwrap().clone()
            } else {
                lemma(rng)
            };
            EntityGroup {
                words,
                group_type: if rng.random_bool(0.5) { GroupType::Noun } else { GroupType::Verb },
                main_word,
            }
        })
        .collect();
    let intents = (0..rng.random_range(0..=3))
        .map(|_| Intent {
            name: "subject".into(),
            intent_type: "narration".into(),
            probability: 0.5,
            subject: rng.random_bool(0.6).then(|| lemma(rng)),
            object: rng.random_bool(0.6).then(|| lemma(rng)),
        })
        .collect();
    Query {
        entities,
        intents,
        k: rng.random_range(1..=6),
        filter: rng.random_bool(0.25).then(|| *SENTIMENTS.choose(rng).unwrap()),
    }
}

// ---- prompt generator ----

const ALPHABET: &[char] = &[
    'a', 'Z', ' ', 'ї', 'Ф', '"', '\\', '/', '\n', '\t', '\u{1}', '\u{7f}', '😀', '{', '}', '[', ':',
    ',', '\u{2028}', 'é',
];

pub fn random_string(rng: &mut StdRng) -> String {
    (0..rng.random_range(0..12))
        .map(|_| *ALPHABET.choose(rng).unwrap())
        .collect()
}

pub fn random_json(rng: &mut StdRng, depth: u32) -> Value {
    let top = if depth == 0 { 5 } else { 7 };
    match rng.random_range(0..top) {
        0 => Value::Null,
        1 => Value::Bool(rng.random_bool(0.5)),
        2 => json!(rng.random_range(-1_000_000i64..1_000_000)),
        3 => {
            let f: f64 = rng.random_range(-1e6..1e6);
            json!(f)
        }
        4 => Value::String(random_string(rng)),
        5 => Value::Array(
            (0..rng.random_range(0..4))
                .map(|_| random_json(rng, depth - 1))
                .collect(),
        ),
        _ => {
            let mut m = Map::new();
            for _ in 0..rng.random_range(0..4) {
                m.insert(random_string(rng), random_json(rng, depth - 1));
            }
            Value::Object(m)
        }
    }
}

/// A random template together with bindings that instantiate it.
pub fn random_prompt_case(rng: &mut StdRng) -> (PromptTemplate, Bindings) {
    let mut fields = Vec::new();
    let mut bindings = Bindings::new();
    let mut keys = BTreeSet::new();
    for n in 0..rng.random_range(1..10) {
        let key = loop {
            let k = format!("{}{n}", random_string(rng));
            if keys.insert(k.clone()) {
                break k;
            }
        };
        let field = match rng.random_range(0..6) {
            0 => PromptField::constant(key, random_json(rng, 2)),
            1 => PromptField::flag(key, rng.random_bool(0.5)),
            2 => {
                let required = rng.random_bool(0.5);
                let default = (!required).then(|| random_json(rng, 1));
                let f = PromptField::binding(key.clone(), required, default);
                if required || rng.random_bool(0.5) {
                    bindings.insert(key, random_json(rng, 2));
                }
                f
            }
            3 => {
                let allowed: Vec<Value> = (0..rng.random_range(1..6))
                    .map(|i| json!(format!("{}{i}", random_string(rng))))
                    .collect();
                let value: Vec<Value> = allowed.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
                PromptField {
                    key,
                    kind: FieldKind::AllowedValuesList,
                    value: Some(Value::Array(value)),
                    default: None,
                    allowed: Some(allowed),
                    bound: None,
                    required: false,
                }
            }
            4 => {
                let bound = rng.random_range(1..100u64);
                PromptField {
                    key,
                    kind: FieldKind::IntegerLimit,
                    value: Some(json!(rng.random_range(0..=bound))),
                    default: None,
                    allowed: None,
                    bound: Some(bound),
                    required: false,
                }
            }
            _ => PromptField {
                key,
                kind: FieldKind::NestedStructure,
                value: Some(random_json(rng, 3)),
                default: None,
                allowed: None,
                bound: None,
                required: false,
            },
        };
        fields.push(field);
    }
    let output_template = rng.random_bool(0.7).then(|| {
        let mut schema = indexmap::IndexMap::new();
        for i in 0..rng.random_range(1..4) {
            schema.insert(
                format!("f{i}"),
                SchemaField {
                    kind: ValueKind::String,
                    description: Some(random_string(rng)),
                    values: None,
                },
            );
        }
        OutputTemplate {
            format: OutputFormat::StructuredObject,
            root: rng.random_bool(0.5).then(|| "result".to_string()),
            cardinality: if rng.random_bool(0.5) { Cardinality::Many } else { Cardinality::One },
            required: vec!["f0".into()],
            schema,
        }
    });
    let template = PromptTemplate {
        id: "generated".into(),
        purpose: Purpose::IntentDetection,
        default: false,
        applicable_intents: vec![],
        fields,
        output_template,
        notes: String::new(),
    };
    (template, bindings)
}

// ---- malformed responses ----

pub enum Stage {
    Intents,
    Entities,
    Conclusion,
}

const VALID_INTENTS: &str = r#"[{"intent": "subject", "type": "interrogation", "probability": 0.8, "subject": "ФРМ", "object": null}, {"intent": "cause", "type": "narration", "probability": 0.6, "subject": "ФРМ", "object": "спиратися"}]"#;

fn valid_intents() -> Vec<Map<String, Value>> {
    serde_json::from_str(VALID_INTENTS).unwrap()
}

fn valid_entities() -> Vec<Map<String, Value>> {
    serde_json::from_value(json!([
        {"words": ["ФРМ"], "type": "noun", "main word": "ФРМ"},
        {"words": ["повинна", "спиратися"], "type": "verb", "main word": "спиратися"}
    ]))
    .unwrap()
}

fn prose(rng: &mut StdRng) -> String {
    const WORDS: &[&str] = &["the", "answer", "is", "unclear", "відповідь", "JSON", "here:", "none of"];
    (0..rng.random_range(1..8))
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn wrap(rng: &mut StdRng, body: String) -> String {
    match rng.random_range(0..3) {
        0 => body,
        1 => format!("{}\n```json\n{body}\n```", prose(rng)),
        _ => format!("{} {body} {}", prose(rng), prose(rng)),
    }
}

/// A response that is malformed by construction for `stage`.
pub fn malformed_response(rng: &mut StdRng, stage: &Stage) -> String {
    let records = |rng: &mut StdRng, mut recs: Vec<Map<String, Value>>, mutate: &dyn Fn(&mut StdRng, &mut Map<String, Value>)| {
        let i = rng.random_range(0..recs.len());
        mutate(rng, &mut recs[i]);
        let body = serde_json::to_string(&recs).unwrap();
        wrap(rng, body)
    };
    let common = rng.random_range(0..4);
    match common {
        // no structured payload at all
        0 => return prose(rng).replace("none of", "nothing"),
        // truncated before the first record closes
        1 => {
            let full = match stage {
                Stage::Intents => VALID_INTENTS.to_string(),
                Stage::Entities => serde_json::to_string(&valid_entities()).unwrap(),
                Stage::Conclusion => r#"{"expected": true, "kind": "compare"}"#.to_string(),
            };
            let first_close = full[..full.find('}').unwrap()].chars().count();
            return full.chars().take(rng.random_range(1..first_close)).collect();
        }
        // a scalar where a structure is expected
        2 => {
            let v = match rng.random_range(0..3) {
                0 => json!(rng.random_range(-5..5)),
                1 => json!(true),
                _ => json!(["a", 1, null]),
            };
            return wrap(rng, v.to_string());
        }
        _ => {}
    }
    match stage {
        Stage::Intents => match rng.random_range(0..5) {
            0 => records(rng, valid_intents(), &|rng, r| {
                let p = if rng.random_bool(0.5) {
                    rng.random_range(1.0001..50.0)
                } else {
                    -rng.random_range(0.0001..50.0)
                };
                r.insert("probability".into(), json!(p));
            }),
            1 => records(rng, valid_intents(), &|rng, r| {
                let key = *["intent", "type", "probability"].choose(rng).unwrap();
                r.remove(key);
            }),
            2 => records(rng, valid_intents(), &|_, r| {
                r.insert("type".into(), json!("exclamation"));
            }),
            3 => records(rng, valid_intents(), &|_, r| {
                r.insert("probability".into(), json!("high"));
            }),
            _ => records(rng, valid_intents(), &|rng, r| {
                let name = *["velocity", "mood", "", "Subject "].choose(rng).unwrap();
                r.insert("intent".into(), json!(name));
            }),
        },
        Stage::Entities => match rng.random_range(0..4) {
            0 => records(rng, valid_entities(), &|_, r| {
                r.insert("main word".into(), json!("відсутнє"));
            }),
            1 => records(rng, valid_entities(), &|_, r| {
                r.insert("words".into(), json!([]));
            }),
            2 => records(rng, valid_entities(), &|_, r| {
                r.insert("type".into(), json!("adjective"));
            }),
            _ => records(rng, valid_entities(), &|rng, r| {
                let key = *["words", "type", "main word"].choose(rng).unwrap();
                r.remove(key);
            }),
        },
        Stage::Conclusion => {
            let v = match rng.random_range(0..3) {
                0 => json!({"expected": false, "kind": prose(rng)}),
                1 => json!({"expected": "yes", "kind": null}),
                _ => json!({"kind": "compare"}),
            };
            wrap(rng, v.to_string())
        }
    }
}
