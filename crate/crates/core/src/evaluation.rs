//! Human judgments of answers and the metrics computed from them.
//!
//! Metrics are exact rationals; [`render`] rounds half-up to four decimals
//! only at the end. The starred variants count true negatives as true
//! results: `precision* = (tp+tn)/(tp+tn+fp)`, `recall* = (tp+tn)/(tp+tn+fn)`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JudgmentLabel {
    TP,
    TN,
    FP,
    FN,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    pub answer_excerpt: String,
    pub label: JudgmentLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl JudgmentCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0} is undefined: zero denominator")]
pub struct UndefinedMetric(pub &'static str);

pub type Metric = Result<Ratio<u64>, UndefinedMetric>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsReport {
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub precision_star: Metric,
    pub recall_star: Metric,
    pub f1_star: Metric,
}

impl MetricsReport {
    pub fn entries(&self) -> [(&'static str, &Metric); 7] {
        [
            ("accuracy", &self.accuracy),
            ("precision", &self.precision),
            ("recall", &self.recall),
            ("f1", &self.f1),
            ("precision*", &self.precision_star),
            ("recall*", &self.recall_star),
            ("f1*", &self.f1_star),
        ]
    }

    /// Metric name → four-decimal string, or null when undefined.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (name, metric) in self.entries() {
            let v = match metric {
                Ok(r) => Value::String(render(r)),
                Err(_) => Value::Null,
            };
            m.insert(name.to_string(), v);
        }
        Value::Object(m)
    }
}

fn ratio(name: &'static str, num: u64, den: u64) -> Metric {
    if den == 0 {
        Err(UndefinedMetric(name))
    } else {
        Ok(Ratio::new(num, den))
    }
}

fn harmonic(name: &'static str, p: &Metric, r: &Metric) -> Metric {
    match (p, r) {
        (Ok(p), Ok(r)) if *p + *r != Ratio::from_integer(0) => {
            Ok(Ratio::from_integer(2) * p * r / (p + r))
        }
        _ => Err(UndefinedMetric(name)),
    }
}

pub fn compute_metrics(c: JudgmentCounts) -> MetricsReport {
    let JudgmentCounts { tp, tn, fp, fn_ } = c;
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    let precision_star = ratio("precision*", tp + tn, tp + tn + fp);
    let recall_star = ratio("recall*", tp + tn, tp + tn + fn_);
    MetricsReport {
        accuracy: ratio("accuracy", tp + tn, c.total()),
        f1: harmonic("f1", &precision, &recall),
        f1_star: harmonic("f1*", &precision_star, &recall_star),
        precision,
        recall,
        precision_star,
        recall_star,
    }
}

/// Rounds half-up to four decimals, e.g. 17/26 → "0.6538".
pub fn render(r: &Ratio<u64>) -> String {
    let (n, d) = (*r.numer() as u128, *r.denom() as u128);
    let scaled = (n * 20_000 + d) / (2 * d);
    format!("{}.{:04}", scaled / 10_000, scaled % 10_000)
}

pub fn tally<'a>(judgments: impl IntoIterator<Item = &'a Judgment>) -> JudgmentCounts {
    let mut c = JudgmentCounts::default();
    for j in judgments {
        match j.label {
            JudgmentLabel::TP => c.tp += 1,
            JudgmentLabel::TN => c.tn += 1,
            JudgmentLabel::FP => c.fp += 1,
            JudgmentLabel::FN => c.fn_ += 1,
        }
    }
    c
}

#[derive(Debug, Error)]
pub enum JudgmentError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Parses newline-delimited judgments; blank lines are skipped.
pub fn load_judgments(document: &str) -> Result<Vec<Judgment>, JudgmentError> {
    document
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| JudgmentError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Judgments in arrival order, optionally mirrored to an NDJSON file.
#[derive(Debug, Default)]
pub struct JudgmentStore {
    judgments: Mutex<Vec<Judgment>>,
    path: Option<PathBuf>,
}

impl JudgmentStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) a judgments file, loading what it already holds.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, JudgmentError> {
        let path = path.as_ref().to_path_buf();
        let existing = match std::fs::read_to_string(&path) {
            Ok(s) => load_judgments(&s)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            judgments: Mutex::new(existing),
            path: Some(path),
        })
    }

    pub fn append(&self, batch: &[Judgment]) -> Result<(), JudgmentError> {
        let mut js = self.judgments.lock().unwrap();
        if let Some(path) = &self.path {
            let mut out = String::new();
            for j in batch {
                out.push_str(&serde_json::to_string(j).expect("judgments serialize"));
                out.push('\n');
            }
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?
                .write_all(out.as_bytes())?;
        }
        js.extend_from_slice(batch);
        Ok(())
    }

    pub fn all(&self) -> Vec<Judgment> {
        self.judgments.lock().unwrap().clone()
    }

    pub fn counts(&self) -> JudgmentCounts {
        tally(self.judgments.lock().unwrap().iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rendered(m: &Metric) -> String {
        render(m.as_ref().unwrap())
    }

    #[test]
    fn table_one_counts() {
        let r = compute_metrics(JudgmentCounts::new(17, 7, 9, 1));
        assert_eq!(rendered(&r.accuracy), "0.7059");
        assert_eq!(rendered(&r.recall), "0.9444");
        assert_eq!(rendered(&r.precision_star), "0.7273");
        assert_eq!(rendered(&r.recall_star), "0.9600");
        assert_eq!(rendered(&r.f1_star), "0.8276");
        assert_eq!(r.precision, Ok(Ratio::new(17, 26)));
        assert_eq!(rendered(&r.precision), "0.6538");
        assert_eq!(r.f1, Ok(Ratio::new(34, 44)));
        assert_eq!(rendered(&r.f1), "0.7727");
    }

    #[test]
    fn perfect_and_empty() {
        let r = compute_metrics(JudgmentCounts::new(1, 0, 0, 0));
        for (_, m) in r.entries() {
            assert_eq!(rendered(m), "1.0000");
        }
        let r = compute_metrics(JudgmentCounts::default());
        for (name, m) in r.entries() {
            assert_eq!(m, &Err(UndefinedMetric(name)));
        }
        assert_eq!(r.to_json()["f1*"], Value::Null);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(render(&Ratio::new(1, 8)), "0.1250");
        assert_eq!(render(&Ratio::new(1, 20_000)), "0.0001");
        assert_eq!(render(&Ratio::new(1, 20_001)), "0.0000");
        assert_eq!(render(&Ratio::new(2, 3)), "0.6667");
    }

    #[test]
    fn tally_counts_every_judgment() {
        let j = |q: &str, label| Judgment {
            question_id: q.into(),
            intent: None,
            answer_excerpt: String::new(),
            label,
        };
        assert_eq!(tally(&[]), JudgmentCounts::default());
        let js = [j("q1", JudgmentLabel::TP), j("q1", JudgmentLabel::FP)];
        assert_eq!(tally(&js), JudgmentCounts::new(1, 0, 1, 0));
    }

    #[test]
    fn counts_serialize_with_fn_key() {
        let v = serde_json::to_value(JudgmentCounts::new(1, 2, 3, 4)).unwrap();
        assert_eq!(v, serde_json::json!({"tp": 1, "tn": 2, "fp": 3, "fn": 4}));
    }

    #[test]
    fn bad_line_reports_position() {
        let err = load_judgments("\n{\"question_id\": \"q\"}\n").unwrap_err();
        assert!(matches!(err, JudgmentError::Parse { line: 2, .. }));
    }

    #[test]
    fn store_persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.ndjson");
        let store = JudgmentStore::open(&path).unwrap();
        let j = Judgment {
            question_id: "q1".into(),
            intent: Some("cause".into()),
            answer_excerpt: "x".into(),
            label: JudgmentLabel::TN,
        };
        store.append(&[j.clone(), j.clone()]).unwrap();
        let again = JudgmentStore::open(&path).unwrap();
        assert_eq!(again.all(), vec![j.clone(), j]);
        assert_eq!(again.counts(), JudgmentCounts::new(0, 2, 0, 0));
    }
}
