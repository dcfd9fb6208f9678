//! Execution trace of one dialogue act.
//!
//! States follow the marking graph of the dialogue act:
//!
//! ```text
//! M0 -PREP-> M1 -+-INT-DEF----> M2 -+
//!                +-CON-INT-DEF-> M4 -+-CX-SEL-> M7 -+-INF-EXTR (per intent)-> M8 -+-RES-FORM-> M10
//!                +-ENT-EXTR----> M6 -+              +-CON-DER---------------> M9 -+
//! ```
//!
//! Prompt formation (INF-PR-FORM, CON-PR-FORM) is recorded on the M8/M9
//! entries that consume the prompts.

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum State {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
    M10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum Process {
    Prep,
    IntDef,
    ConIntDef,
    EntExtr,
    InfPrForm,
    ConPrForm,
    CxSel,
    InfExtr,
    ConDer,
    ResForm,
}

impl Process {
    pub fn as_str(self) -> &'static str {
        match self {
            Process::Prep => "PREP",
            Process::IntDef => "INT-DEF",
            Process::ConIntDef => "CON-INT-DEF",
            Process::EntExtr => "ENT-EXTR",
            Process::InfPrForm => "INF-PR-FORM",
            Process::ConPrForm => "CON-PR-FORM",
            Process::CxSel => "CX-SEL",
            Process::InfExtr => "INF-EXTR",
            Process::ConDer => "CON-DER",
            Process::ResForm => "RES-FORM",
        }
    }
}

impl std::fmt::Display for Process {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One prompt sent to the backend and the raw text it returned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub template_id: String,
    pub prompt: String,
    pub response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub state: State,
    /// Process that produced this state; `None` for M0.
    pub process: Option<Process>,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<Exchange>,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueTrace {
    pub entries: Vec<TraceEntry>,
}

impl DialogueTrace {
    pub fn push(&mut self, entry: TraceEntry) {
        self.entries.push(entry);
    }

    pub fn states(&self) -> Vec<State> {
        self.entries.iter().map(|e| e.state).collect()
    }

    pub fn last_state(&self) -> Option<State> {
        self.entries.last().map(|e| e.state)
    }

    pub fn count(&self, state: State) -> usize {
        self.entries.iter().filter(|e| e.state == state).count()
    }

    pub fn exchanges(&self) -> impl Iterator<Item = &Exchange> {
        self.entries.iter().flat_map(|e| e.exchanges.iter())
    }

    /// Copy with every timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> DialogueTrace {
        let mut t = self.clone();
        for e in &mut t.entries {
            e.elapsed_us = 0;
        }
        t
    }

    /// Checks that the states respect the marking-graph order. A trace may
    /// stop early (short-circuit or failure) but may not skip ahead.
    pub fn check_order(&self) -> Result<(), String> {
        let states = self.states();
        let mut it = states.iter().copied().peekable();
        if it.next() != Some(State::M0) {
            return Err("trace must begin at M0".into());
        }
        match it.next() {
            None => return Ok(()),
            Some(State::M1) => {}
            Some(s) => return Err(format!("expected M1 after M0, found {s:?}")),
        }
        let mut branches = Vec::new();
        while let Some(&s) = it.peek() {
            if !matches!(s, State::M2 | State::M4 | State::M6) {
                break;
            }
            if branches.contains(&s) {
                return Err(format!("{s:?} appears twice"));
            }
            branches.push(s);
            it.next();
        }
        match it.next() {
            None => return Ok(()),
            Some(State::M7) if branches.len() == 3 => {}
            Some(s) => {
                return Err(format!(
                    "{s:?} after {branches:?}; M7 requires M2, M4 and M6"
                ))
            }
        }
        let mut m9 = 0;
        for s in it.by_ref() {
            match s {
                State::M8 => {}
                State::M9 if m9 == 0 => m9 += 1,
                State::M10 => break,
                other => return Err(format!("unexpected {other:?} after M7")),
            }
        }
        match it.next() {
            None => Ok(()),
            Some(s) => Err(format!("{s:?} after M10")),
        }
    }
}
