mod common;

use std::sync::Arc;

use common::*;
use ontoprompt_core::context_store::ContextStore;
use ontoprompt_core::dialogue::{
    AnswerStatus, DialogueEngine, PipelineConfig, PipelineError, State,
};
use ontoprompt_core::evaluation::{compute_metrics, JudgmentCounts};
use ontoprompt_core::llm_backend::{Matcher, ScriptEntry, ScriptedBackend};
use ontoprompt_core::meta_ontology::Purpose;
use ontoprompt_core::prompt_engine::{
    instantiate, parse_prompt, parse_response, render, Payload,
};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().build().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn selection_matches_exhaustive_oracle(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let entries = random_store(&mut rng, 50);
        let store = ContextStore::new(entries.clone()).unwrap();
        for _ in 0..5 {
            let q = random_query(&mut rng);
            let got = store.select_contexts(&q.entities, &q.intents, q.k, q.filter);
            let want = oracle_select(&entries, &q.entities, &q.intents, q.k, q.filter);
            prop_assert_eq!(got.0, want);
        }
    }

    #[test]
    fn adding_a_context_never_lowers_other_scores(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut entries = random_store(&mut rng, 20);
        let q = random_query(&mut rng);
        let before = oracle_select(&entries, &q.entities, &q.intents, usize::MAX, None);
        let extra = random_store(&mut rng, 1);
        if let Some(mut c) = extra.into_iter().next() {
            c.id = "zz-new".into();
            entries.push(c);
        }
        let store = ContextStore::new(entries).unwrap();
        let after = store.select_contexts(&q.entities, &q.intents, usize::MAX, None);
        for b in before {
            let a = after.iter().find(|s| s.context_id == b.context_id).unwrap();
            prop_assert!(a.score >= b.score);
        }
    }

    #[test]
    fn no_selection_means_no_extraction_calls(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let entries = random_store(&mut rng, 10);
        // words no generated lemma uses
        let backend = Arc::new(ScriptedBackend::new(vec![
            entry("intents-v1", r#"[{"intent": "place", "type": "narration", "probability": 0.9, "subject": "вокзал", "object": "поїзд"}]"#),
            entry("conclusion-v1", r#"{"expected": true, "kind": "compare"}"#),
            entry("entities-v1", r#"[{"words": ["вокзал", "поїзд"], "type": "noun", "main word": "вокзал"}]"#),
        ]));
        let engine = DialogueEngine::new(
            Arc::new(onto()),
            Arc::new(ContextStore::new(entries).unwrap()),
            backend.clone(),
            PipelineConfig::default(),
        );
        let out = runtime().block_on(engine.run("Де вокзал?", None)).unwrap();
        prop_assert_eq!(out.trace.last_state(), Some(State::M7));
        prop_assert_eq!(out.answer.status, AnswerStatus::NoRelevantContexts);
        prop_assert_eq!(backend.call_count(), 3);
    }

    #[test]
    fn starred_metrics_dominate(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let r = compute_metrics(JudgmentCounts::new(tp, tn, fp, fn_));
        if let (Ok(p), Ok(ps)) = (&r.precision, &r.precision_star) {
            prop_assert!(ps >= p);
            if tn == 0 { prop_assert_eq!(ps, p); }
        }
        if let (Ok(rc), Ok(rs)) = (&r.recall, &r.recall_star) {
            prop_assert!(rs >= rc);
            if tn == 0 { prop_assert_eq!(rs, rc); }
        }
        for (_, m) in r.entries() {
            if let Ok(v) = m {
                prop_assert!(*v.numer() <= *v.denom());
            }
        }
    }
}

fn entry(pattern: &str, response: &str) -> ScriptEntry {
    ScriptEntry {
        matcher: Matcher::TemplateId,
        pattern: pattern.into(),
        response: response.into(),
    }
}

#[test]
fn render_parse_render_is_idempotent() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    for _ in 0..1000 {
        let (template, bindings) = random_prompt_case(&mut rng);
        let p = instantiate(&template, &bindings).unwrap();
        let text = render(&p);
        let again = parse_prompt(&text, &template).unwrap();
        assert_eq!(render(&again), text);
        assert_eq!(again.entries, p.entries);
    }
}

#[test]
fn fixture_prompts_round_trip() {
    let onto = onto();
    let mut rng = StdRng::seed_from_u64(1);
    for t in &onto.templates {
        let mut b = ontoprompt_core::prompt_engine::Bindings::new();
        for f in t.fields.iter().filter(|f| f.required) {
            b.insert(f.key.clone(), random_json(&mut rng, 2));
        }
        let p = instantiate(t, &b).unwrap();
        assert_eq!(render(&parse_prompt(&render(&p), t).unwrap()), render(&p));
    }
}

#[tokio::test]
async fn fuzzed_responses_never_crash() {
    let onto = Arc::new(onto());
    let mut rng = StdRng::seed_from_u64(0xf022);
    for n in 0..500 {
        let (stage, template) = match n % 3 {
            0 => (Stage::Intents, "intents-v1"),
            1 => (Stage::Entities, "entities-v1"),
            _ => (Stage::Conclusion, "conclusion-v1"),
        };
        let raw = malformed_response(&mut rng, &stage);
        let backend = Arc::new(ScriptedBackend::new(vec![entry(template, &raw)]));
        let engine = engine_with(onto.clone(), backend);
        let err = match stage {
            Stage::Intents => engine.detect_intents("q").await.err(),
            Stage::Entities => engine.extract_entities("q").await.err(),
            Stage::Conclusion => engine.detect_conclusion_directive("q").await.err(),
        };
        assert!(
            matches!(err, Some(PipelineError::MalformedResponse { .. })),
            "case {n}: {raw:?} gave {err:?}"
        );
    }
}

#[test]
fn probability_bounds_are_enforced() {
    let onto = onto();
    let out = onto
        .lookup_template(Purpose::IntentDetection, None)
        .unwrap()
        .output_template
        .clone()
        .unwrap();
    for (p, ok) in [(0.0, true), (1.0, true), (0.5, true), (1.01, false), (-0.01, false)] {
        let raw = format!(r#"[{{"intent": "cause", "type": "narration", "probability": {p}}}]"#);
        let parsed = parse_response(&raw, &out).unwrap();
        assert_eq!(parsed.violations.is_empty(), ok, "{p}");
        if !ok {
            assert_eq!(parsed.violations[0].path, "result[0].probability");
        }
    }
    for raw in ["None", "none", "\"None\"", "None.", "```\nNone\n```"] {
        assert_eq!(parse_response(raw, &out).unwrap().payload, Payload::NoneMarker, "{raw}");
    }
}
