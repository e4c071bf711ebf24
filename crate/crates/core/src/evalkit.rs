//! Text-side metrics: word error rate between a text response and the
//! transcript of its speech, spoken-QA containment accuracy, and report
//! aggregation.
//!
//! Both sides of every comparison pass through [`normalize`]: lowercase,
//! punctuation removed, whitespace collapsed. This is a deliberately small
//! normalizer; it does not expand numbers or contractions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::LatencyBreakdown;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("reference normalizes to no words")]
    EmptyReference,
    #[error("no spoken-QA items")]
    NoItems,
}

/// Words after normalization; never contains an empty token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedText(Vec<String>);

impl NormalizedText {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn joined(&self) -> String {
        self.0.join(" ")
    }
}

pub fn normalize(text: &str) -> NormalizedText {
    let cleaned: String =
        text.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).flat_map(char::to_lowercase).collect();
    NormalizedText(cleaned.split_whitespace().map(str::to_owned).collect())
}

/// Minimum number of substitutions, insertions and deletions turning `a`
/// into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerScore {
    pub edits: usize,
    pub reference_words: usize,
    pub wer: f64,
}

pub fn wer_score(reference: &str, hypothesis: &str) -> Result<WerScore, EvalError> {
    let r = normalize(reference);
    if r.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let h = normalize(hypothesis);
    let edits = edit_distance(r.tokens(), h.tokens());
    Ok(WerScore { edits, reference_words: r.tokens().len(), wer: edits as f64 / r.tokens().len() as f64 })
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, EvalError> {
    wer_score(reference, hypothesis).map(|s| s.wer)
}

/// True when any normalized answer occurs inside the normalized response.
pub fn spokenqa_hit(response: &str, answers: &[String]) -> bool {
    let response = normalize(response).joined();
    answers.iter().map(|a| normalize(a)).filter(|a| !a.is_empty()).any(|a| response.contains(&a.joined()))
}

pub fn spokenqa_accuracy(items: &[QaItem]) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::NoItems);
    }
    let hits = items.iter().filter(|i| spokenqa_hit(&i.response, &i.answers)).count();
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerItem {
    #[serde(default)]
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    /// Externally produced per-item scores (judge scores, MOS), reported as is.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    #[serde(default)]
    pub id: String,
    pub response: String,
    pub answers: Vec<String>,
}

/// One line of an evaluation input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvalRecord {
    Wer(WerItem),
    Qa(QaItem),
    Latency(LatencyBreakdown),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemWer {
    pub id: String,
    pub edits: usize,
    pub reference_words: usize,
    pub wer: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_total_ms: f64,
    pub min_total_ms: f64,
    pub max_total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: Vec<ItemWer>,
    /// Total edits over total reference words.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qa_accuracy: Option<f64>,
    pub qa_hits: usize,
    pub qa_items: usize,
    /// Mean of each external score over the items that carry it.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external_means: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencySummary>,
}

pub fn aggregate_report(
    wer_items: &[WerItem],
    qa_items: &[QaItem],
    latencies: &[LatencyBreakdown],
) -> Result<MetricReport, EvalError> {
    let mut report = MetricReport::default();
    let (mut edits, mut words) = (0usize, 0usize);
    let mut external: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for item in wer_items {
        let s = wer_score(&item.reference, &item.hypothesis)?;
        edits += s.edits;
        words += s.reference_words;
        for (k, v) in &item.external {
            let e = external.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
        report.items.push(ItemWer {
            id: item.id.clone(),
            edits: s.edits,
            reference_words: s.reference_words,
            wer: s.wer,
            external: item.external.clone(),
        });
    }
    if words > 0 {
        report.corpus_wer = Some(edits as f64 / words as f64);
    }
    report.external_means = external.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect();
    if !qa_items.is_empty() {
        report.qa_items = qa_items.len();
        report.qa_hits = qa_items.iter().filter(|i| spokenqa_hit(&i.response, &i.answers)).count();
        report.qa_accuracy = Some(report.qa_hits as f64 / report.qa_items as f64);
    }
    if !latencies.is_empty() {
        let totals = latencies.iter().map(|l| l.total_ms);
        report.latency = Some(LatencySummary {
            count: latencies.len(),
            mean_total_ms: totals.clone().sum::<f64>() / latencies.len() as f64,
            min_total_ms: totals.clone().fold(f64::INFINITY, f64::min),
            max_total_ms: totals.fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(report)
}

pub fn aggregate_records(records: &[EvalRecord]) -> Result<MetricReport, EvalError> {
    let mut wer_items = Vec::new();
    let mut qa = Vec::new();
    let mut lat = Vec::new();
    for r in records {
        match r {
            EvalRecord::Wer(w) => wer_items.push(w.clone()),
            EvalRecord::Qa(q) => qa.push(q.clone()),
            EvalRecord::Latency(l) => lat.push(l.clone()),
        }
    }
    aggregate_report(&wer_items, &qa, &lat)
}

/// One line of an exported report: per-item rows, then a corpus row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "row", rename_all = "lowercase")]
pub enum ReportRow {
    Item(ItemWer),
    Corpus {
        #[serde(skip_serializing_if = "Option::is_none")]
        corpus_wer: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        qa_accuracy: Option<f64>,
        qa_hits: usize,
        qa_items: usize,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        external_means: BTreeMap<String, f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        latency: Option<LatencySummary>,
    },
}

impl MetricReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows: Vec<ReportRow> = self.items.iter().cloned().map(ReportRow::Item).collect();
        rows.push(ReportRow::Corpus {
            corpus_wer: self.corpus_wer,
            qa_accuracy: self.qa_accuracy,
            qa_hits: self.qa_hits,
            qa_items: self.qa_items,
            external_means: self.external_means.clone(),
            latency: self.latency.clone(),
        });
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qa(response: &str, answers: &[&str]) -> QaItem {
        QaItem {
            id: String::new(),
            response: response.into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn wer_item(reference: &str, hypothesis: &str) -> WerItem {
        WerItem {
            id: String::new(),
            reference: reference.into(),
            hypothesis: hypothesis.into(),
            external: BTreeMap::new(),
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("  Hello,   WORLD! ").joined(), "hello world");
        assert_eq!(normalize("don't stop").joined(), "dont stop");
        assert!(normalize("?!").is_empty());
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("the cat sat", "The cat, sat.").unwrap(), 0.0);
        assert_eq!(wer("hello world", "hello there world").unwrap(), 0.5);
        assert_eq!(wer("a b c", "").unwrap(), 1.0);
        assert_eq!(wer("...", "a"), Err(EvalError::EmptyReference));
    }

    #[test]
    fn qa_examples() {
        assert_eq!(spokenqa_accuracy(&[qa("the capital is paris", &["Paris"])]).unwrap(), 1.0);
        assert_eq!(spokenqa_accuracy(&[qa("unknown", &["Paris"])]).unwrap(), 0.0);
        let items =
            [qa("It is Paris.", &["paris"]), qa("no idea", &["Rome"]), qa("Mount Everest!", &["everest", "k2"])];
        assert!((spokenqa_accuracy(&items).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(spokenqa_accuracy(&[]), Err(EvalError::NoItems));
    }

    #[test]
    fn report_weighting() {
        let r = aggregate_report(&[wer_item("a", "b"), wer_item("x y z", "x y z")], &[], &[]).unwrap();
        assert_eq!(r.corpus_wer, Some(0.25));
        assert_eq!(r.items.len(), 2);

        let single = aggregate_report(&[wer_item("hello world", "hello there world")], &[], &[]).unwrap();
        assert_eq!(single.corpus_wer, Some(0.5));
        assert_eq!(single.items[0].wer, 0.5);

        let qa_only = aggregate_report(&[], &[qa("paris", &["paris"])], &[]).unwrap();
        assert_eq!(qa_only.corpus_wer, None);
        assert_eq!(qa_only.qa_accuracy, Some(1.0));
        let json = serde_json::to_value(&qa_only).unwrap();
        assert!(json.get("corpus_wer").is_none());
    }

    #[test]
    fn external_scores_pass_through() {
        let mut a = wer_item("a", "a");
        a.external.insert("utmos".into(), 4.0);
        let mut b = wer_item("b", "b");
        b.external.insert("utmos".into(), 3.0);
        let r = aggregate_report(&[a, b], &[], &[]).unwrap();
        assert_eq!(r.external_means["utmos"], 3.5);
    }

    #[test]
    fn record_lines_parse() {
        let line = r#"{"kind":"qa","response":"paris","answers":["Paris"]}"#;
        assert!(matches!(serde_json::from_str::<EvalRecord>(line).unwrap(), EvalRecord::Qa(_)));
        let line = r#"{"kind":"latency","llm_ms":1.0,"tts_ms":2.0,"fm_voc_ms":3.0,"total_ms":6.0}"#;
        assert!(matches!(serde_json::from_str::<EvalRecord>(line).unwrap(), EvalRecord::Latency(_)));
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "c", "the", "cat"]).prop_map(String::from)
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            x in prop::collection::vec(word(), 0..8),
            y in prop::collection::vec(word(), 0..8),
            z in prop::collection::vec(word(), 0..8),
        ) {
            prop_assert_eq!(edit_distance(&x, &x), 0);
            prop_assert_eq!(edit_distance(&x, &y), edit_distance(&y, &x));
            prop_assert!(edit_distance(&x, &z) <= edit_distance(&x, &y) + edit_distance(&y, &z));
            if x != y {
                prop_assert!(edit_distance(&x, &y) > 0);
            }
        }

        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once.joined()), once.clone());
            prop_assert!(once.tokens().iter().all(|t| !t.is_empty()));
        }
    }
}
