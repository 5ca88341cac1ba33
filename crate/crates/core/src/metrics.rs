//! Downstream metrics: ANLS for VQA, accuracy for CLS and NLI, entity-level
//! F1 for KIE.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::instruct::Task;

pub const ANLS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    NoGold,
    LengthMismatch { preds: usize, golds: usize },
    Empty(&'static str),
    UnknownMetric(String),
    Parse { line: usize, msg: String },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoGold => write!(f, "ANLS needs at least one gold answer"),
            Self::LengthMismatch { preds, golds } => write!(f, "{preds} predictions for {golds} gold answers"),
            Self::Empty(what) => write!(f, "no examples for {what}"),
            Self::UnknownMetric(m) => write!(f, "unknown metric `{m}` (expected anls, f1 or acc)"),
            Self::Parse { line, msg } => write!(f, "predictions line {line}: {msg}"),
        }
    }
}

impl std::error::Error for MetricError {}

/// Lowercase with runs of whitespace collapsed to one space and trimmed.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Character-level edit distance.
pub fn lev(a: &str, b: &str) -> usize {
    strsim::levenshtein(a, b)
}

/// Normalized Levenshtein similarity of already-normalized strings.
fn nls(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        return 1.0;
    }
    1.0 - lev(a, b) as f64 / n as f64
}

/// Best similarity over the golds, zeroed below `threshold`.
pub fn anls(pred: &str, golds: &[String], threshold: f64) -> Result<f64, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::NoGold);
    }
    let p = normalize(pred);
    let s = golds
        .iter()
        .map(|g| nls(&p, &normalize(g)))
        .fold(0.0, f64::max);
    Ok(if s >= threshold { s } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1 {
    fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        if predicted == 0 && gold == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// True positives, predicted pairs and gold pairs for one document. A
/// predicted "None" is no prediction: on an absent key it is a true
/// negative, on a present key a miss.
fn kie_counts(preds: &BTreeMap<String, String>, golds: &BTreeMap<String, String>) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut predicted = 0;
    for (k, v) in preds {
        let v = normalize(v);
        if v == "none" {
            continue;
        }
        predicted += 1;
        if golds.get(k).is_some_and(|g| normalize(g) == v) {
            tp += 1;
        }
    }
    (tp, predicted, golds.len())
}

/// Entity-level F1 over key/value pairs of one document: a pair is correct
/// when the normalized value matches the gold value of the same key.
pub fn kie_f1(preds: &BTreeMap<String, String>, golds: &BTreeMap<String, String>) -> F1 {
    let (tp, p, g) = kie_counts(preds, golds);
    F1::from_counts(tp, p, g)
}

/// Key to value, one document.
pub type KeyValues = BTreeMap<String, String>;

/// Micro-averaged F1 over documents, as `(predicted, gold)` pairs.
pub fn kie_f1_docs(docs: &[(KeyValues, KeyValues)]) -> F1 {
    let (tp, p, g) = docs.iter().fold((0, 0, 0), |acc, (pr, go)| {
        let (a, b, c) = kie_counts(pr, go);
        (acc.0 + a, acc.1 + b, acc.2 + c)
    });
    F1::from_counts(tp, p, g)
}

/// Normalized exact-match rate.
pub fn exact_accuracy<S: AsRef<str>>(preds: &[S], golds: &[S]) -> Result<f64, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty("accuracy"));
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize(p.as_ref()) == normalize(g.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Anls,
    F1,
    Acc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Anls => "anls",
            Metric::F1 => "f1",
            Metric::Acc => "acc",
        }
    }

    /// Tasks scored by this metric.
    pub fn tasks(self) -> &'static [Task] {
        match self {
            Metric::Anls => &[Task::Vqa],
            Metric::F1 => &[Task::Kie],
            Metric::Acc => &[Task::Cls, Task::Nli],
        }
    }

    /// Parses a comma-separated list such as `anls,f1,acc`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>, MetricError> {
        s.split(',')
            .map(str::trim)
            .filter(|m| !m.is_empty())
            .map(|m| match m {
                "anls" => Ok(Metric::Anls),
                "f1" => Ok(Metric::F1),
                "acc" | "accuracy" => Ok(Metric::Acc),
                other => Err(MetricError::UnknownMetric(other.to_string())),
            })
            .collect()
    }
}

/// One or several gold answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    One(String),
    Many(Vec<String>),
}

impl Gold {
    pub fn answers(&self) -> Vec<String> {
        match self {
            Gold::One(s) => vec![s.clone()],
            Gold::Many(v) => v.clone(),
        }
    }

    pub fn first(&self) -> &str {
        match self {
            Gold::One(s) => s,
            Gold::Many(v) => v.first().map(String::as_str).unwrap_or(""),
        }
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub task: Task,
    pub pred: String,
    pub gold: Gold,
    /// KIE only: the key the prediction is for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, MetricError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    /// Per-example scores for ANLS and accuracy, per-document F1 for KIE.
    pub per_example: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<F1>,
}

/// Scores `preds` with each requested metric. Metrics with no matching
/// examples are skipped.
pub fn evaluate(preds: &[Prediction], metrics: &[Metric]) -> Result<Vec<EvalResult>, MetricError> {
    let mut out = Vec::new();
    for &m in metrics {
        let rows: Vec<&Prediction> = preds.iter().filter(|p| m.tasks().contains(&p.task)).collect();
        if rows.is_empty() {
            log::warn!("no predictions for metric {}", m.name());
            continue;
        }
        let result = match m {
            Metric::Anls => {
                let scores = rows
                    .iter()
                    .map(|p| anls(&p.pred, &p.gold.answers(), ANLS_THRESHOLD))
                    .collect::<Result<Vec<_>, _>>()?;
                EvalResult {
                    metric: m,
                    value: scores.iter().sum::<f64>() / scores.len() as f64,
                    n: scores.len(),
                    per_example: scores,
                    f1: None,
                }
            }
            Metric::Acc => {
                let scores: Vec<f64> = rows
                    .iter()
                    .map(|p| f64::from(u8::from(normalize(&p.pred) == normalize(p.gold.first()))))
                    .collect();
                EvalResult {
                    metric: m,
                    value: scores.iter().sum::<f64>() / scores.len() as f64,
                    n: scores.len(),
                    per_example: scores,
                    f1: None,
                }
            }
            Metric::F1 => {
                let mut docs: BTreeMap<&str, (KeyValues, KeyValues)> = BTreeMap::new();
                for (i, p) in rows.iter().enumerate() {
                    let key = p.key.clone().unwrap_or_else(|| format!("#{i}"));
                    let entry = docs.entry(p.doc_id.as_str()).or_default();
                    entry.0.insert(key.clone(), p.pred.clone());
                    let gold = p.gold.first();
                    if normalize(gold) != "none" {
                        entry.1.insert(key, gold.to_string());
                    }
                }
                let pairs: Vec<_> = docs.into_values().collect();
                let f1 = kie_f1_docs(&pairs);
                EvalResult {
                    metric: m,
                    value: f1.f1,
                    n: rows.len(),
                    per_example: pairs.iter().map(|(p, g)| kie_f1(p, g).f1).collect(),
                    f1: Some(f1),
                }
            }
        };
        out.push(result);
    }
    Ok(out)
}

/// Human-readable table of results.
pub fn report_table(results: &[EvalResult]) -> String {
    let mut s = format!("{:<8}{:>10}{:>8}\n", "metric", "value", "n");
    for r in results {
        s.push_str(&format!("{:<8}{:>10.4}{:>8}\n", r.metric.name(), r.value, r.n));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn anls_cases() {
        let g = |s: &str| vec![s.to_string()];
        assert_eq!(anls("answer", &g("answer"), 0.5).unwrap(), 1.0);
        assert!((anls("hello", &g("hallo"), 0.5).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(anls("abc", &g("xyz"), 0.5).unwrap(), 0.0);
        assert_eq!(anls("  Hello   World ", &g("hello world"), 0.5).unwrap(), 1.0);
        assert_eq!(anls("x", &[], 0.5), Err(MetricError::NoGold));
        let golds = vec!["zzzzz".to_string(), "hallo".to_string()];
        assert!((anls("hello", &golds, 0.5).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn kie_cases() {
        let gold = map(&[("a", "1"), ("b", "2")]);
        assert_eq!(kie_f1(&gold, &gold).f1, 1.0);
        let half = kie_f1(&map(&[("a", "1")]), &gold);
        assert_eq!(half.precision, 1.0);
        assert_eq!(half.recall, 0.5);
        assert!((half.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(kie_f1(&map(&[]), &gold).f1, 0.0);
        let with_none = kie_f1(&map(&[("a", "1"), ("b", "2"), ("c", "None")]), &gold);
        assert_eq!(with_none.f1, 1.0);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(exact_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(exact_accuracy(&["a", "b", "c", "d"], &["a", "b", "c", "x"]).unwrap(), 0.75);
        assert_eq!(exact_accuracy(&["Yes"], &["yes"]).unwrap(), 1.0);
        assert!(exact_accuracy::<&str>(&[], &[]).is_err());
        assert!(exact_accuracy(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(
            Metric::parse_list("anls,f1,acc").unwrap(),
            vec![Metric::Anls, Metric::F1, Metric::Acc]
        );
        assert!(Metric::parse_list("bleu").is_err());
    }

    #[test]
    fn evaluates_prediction_lines() {
        let text = r#"{"doc_id":"a","task":"VQA","pred":"hello","gold":["hallo"]}
{"doc_id":"a","task":"CLS","pred":"Form","gold":"form"}
{"doc_id":"b","task":"NLI","pred":"No","gold":"Yes"}
{"doc_id":"a","task":"KIE","pred":"1","gold":"1","key":"x"}
{"doc_id":"a","task":"KIE","pred":"3","gold":"2","key":"y"}
"#;
        let preds = parse_predictions(text).unwrap();
        let r = evaluate(&preds, &Metric::parse_list("anls,f1,acc").unwrap()).unwrap();
        assert!((r[0].value - 0.8).abs() < 1e-12);
        assert!((r[1].value - 0.5).abs() < 1e-12);
        assert!((r[2].value - 0.5).abs() < 1e-12);
        assert!(report_table(&r).contains("anls"));
        assert!(parse_predictions("{oops").is_err());
    }
}
