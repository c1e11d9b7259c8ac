//! Evaluation metrics and KCS histogram reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{CoreReport, KcsResult};
use crate::score::{Her2Score, NUM_CLASSES};

pub const REPORT_SCHEMA: &str = "pss-report/1";

/// Published accuracy envelope (min, median, max) at N = 20, k = 5 on the
/// clinical blind set. Not reproducible without that data.
pub const REFERENCE_ACCURACY_ENVELOPE: [f64; 3] = [0.8252, 0.8470, 0.8776];

/// Published adjacent-pair accuracies for (0, 1+), (1+, 2+), (2+, 3+).
pub const REFERENCE_PAIRWISE_ACCURACY: [f64; 3] = [0.8962, 0.8468, 0.8726];

/// Rows are true labels, columns predicted scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: Her2Score, predicted: Her2Score) {
        self.counts[label.index()][predicted.index()] += 1;
    }

    pub fn get(&self, label: Her2Score, predicted: Her2Score) -> u64 {
        self.counts[label.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn accuracy(&self) -> Result<f64> {
        accuracy(self)
    }
}

pub fn confusion(labels: &[Her2Score], predictions: &[Her2Score]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Arity(format!(
            "{} labels for {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut cm = ConfusionMatrix::new();
    for (&l, &p) in labels.iter().zip(predictions) {
        cm.add(l, p);
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::DegenerateInput("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// How adjacent-pair accuracy treats predictions outside the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffPair {
    /// They stay in the denominator as errors.
    #[default]
    CountAsWrong,
    /// Samples predicted outside the pair are dropped.
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseAccuracy {
    pub class_a: Her2Score,
    pub class_b: Her2Score,
    pub accuracy: f64,
    pub samples: usize,
    pub off_pair: OffPair,
}

pub fn adjacent_pair_accuracy(
    labels: &[Her2Score],
    predictions: &[Her2Score],
    a: Her2Score,
    b: Her2Score,
    off_pair: OffPair,
) -> Result<PairwiseAccuracy> {
    if labels.len() != predictions.len() {
        return Err(Error::Arity(format!(
            "{} labels for {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if a.index().abs_diff(b.index()) != 1 {
        return Err(Error::Domain(format!("{a} and {b} are not adjacent scores")));
    }
    let in_pair = |s: Her2Score| s == a || s == b;
    let mut samples = 0;
    let mut correct = 0;
    for (&l, &p) in labels.iter().zip(predictions) {
        if !in_pair(l) || (off_pair == OffPair::Exclude && !in_pair(p)) {
            continue;
        }
        samples += 1;
        correct += usize::from(l == p);
    }
    if samples == 0 {
        return Err(Error::DegenerateInput(format!("no samples labeled {a} or {b}")));
    }
    Ok(PairwiseAccuracy {
        class_a: a.min(b),
        class_b: a.max(b),
        accuracy: correct as f64 / samples as f64,
        samples,
        off_pair,
    })
}

/// Percentage with four significant digits: `0.847 -> "84.70%"`.
pub fn format_percent(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if !pct.is_finite() {
        return format!("{pct}%");
    }
    if pct == 0.0 {
        return "0.000%".into();
    }
    let magnitude = pct.abs().log10().floor() as i32;
    let mut decimals = (3 - magnitude).max(0) as usize;
    // Rounding can carry into a new digit (99.995 -> 100.0).
    let rendered = format!("{pct:.decimals$}");
    let int_digits = rendered.trim_start_matches('-').split('.').next().unwrap().len() as i32;
    if int_digits > magnitude + 1 && decimals > 0 {
        decimals -= 1;
        return format!("{pct:.decimals$}%");
    }
    format!("{rendered}%")
}

/// Global accuracy, confusion matrix and the three adjacent-pair accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub schema: String,
    pub kind: String,
    pub samples: usize,
    pub accuracy: f64,
    pub accuracy_display: String,
    pub confusion: ConfusionMatrix,
    /// One entry per adjacent pair, `None` when no sample carries either label.
    pub pairwise: Vec<Option<PairwiseAccuracy>>,
    pub off_pair: OffPair,
}

pub fn evaluate(labels: &[Her2Score], predictions: &[Her2Score], off_pair: OffPair) -> Result<EvaluationSummary> {
    let cm = confusion(labels, predictions)?;
    let acc = accuracy(&cm)?;
    let pairwise = (0..NUM_CLASSES - 1)
        .map(|i| {
            match adjacent_pair_accuracy(labels, predictions, Her2Score::ALL[i], Her2Score::ALL[i + 1], off_pair) {
                Ok(p) => Ok(Some(p)),
                Err(Error::DegenerateInput(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    Ok(EvaluationSummary {
        schema: REPORT_SCHEMA.into(),
        kind: "evaluation".into(),
        samples: labels.len(),
        accuracy: acc,
        accuracy_display: format_percent(acc),
        confusion: cm,
        pairwise,
        off_pair,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub sample_id: String,
    pub label: Option<Her2Score>,
    pub final_score: Her2Score,
    pub k: usize,
    pub histogram: [usize; NUM_CLASSES],
}

impl HistogramEntry {
    pub fn from_kcs(sample_id: impl Into<String>, kcs: &KcsResult, label: Option<Her2Score>) -> Self {
        Self {
            sample_id: sample_id.into(),
            label,
            final_score: kcs.final_score,
            k: kcs.selected.len(),
            histogram: kcs.histogram,
        }
    }

    pub fn from_report(report: &CoreReport, label: Option<Her2Score>) -> Self {
        Self {
            sample_id: report.sample_id.clone(),
            label,
            final_score: report.final_score,
            k: report.k,
            histogram: report.histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramGroup {
    /// `None` collects samples without a consensus label.
    pub label: Option<Her2Score>,
    pub samples: Vec<HistogramEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub schema: String,
    pub kind: String,
    pub groups: Vec<HistogramGroup>,
}

/// Groups entries by label (0, 1+, 2+, 3+, then unlabeled), keeping input
/// order within a group. Empty groups are omitted.
pub fn kcs_histogram_report(entries: impl IntoIterator<Item = HistogramEntry>) -> HistogramReport {
    let mut buckets: [Vec<HistogramEntry>; NUM_CLASSES + 1] = Default::default();
    for e in entries {
        let slot = e.label.map_or(NUM_CLASSES, |l| l.index());
        buckets[slot].push(e);
    }
    let groups = buckets
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(i, samples)| HistogramGroup {
            label: Her2Score::from_index(i),
            samples,
        })
        .collect();
    HistogramReport {
        schema: REPORT_SCHEMA.into(),
        kind: "kcs_histograms".into(),
        groups,
    }
}

impl HistogramReport {
    pub fn entries(&self) -> impl Iterator<Item = &HistogramEntry> {
        self.groups.iter().flat_map(|g| &g.samples)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    /// `sample_id,label,final_score,k,h0,h1,h2,h3`; unlabeled rows leave
    /// `label` empty.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "sample_id,label,final_score,k,h0,h1,h2,h3")?;
        for e in self.entries() {
            let [h0, h1, h2, h3] = e.histogram;
            let label = e.label.map_or("", |l| l.label());
            writeln!(w, "{},{label},{},{},{h0},{h1},{h2},{h3}", e.sample_id, e.final_score, e.k)?;
        }
        w.flush()
    }
}

/// Structural validation of a serialized histogram report: schema tag,
/// grouping, 4-bin histograms summing to `k`, and `final_score` equal to the
/// highest non-empty bin.
pub fn validate_histogram_report(doc: &serde_json::Value) -> Result<()> {
    let bad = |m: String| Err(Error::Format(m));
    if doc.get("schema").and_then(|v| v.as_str()) != Some(REPORT_SCHEMA) {
        return bad("missing or wrong schema tag".into());
    }
    if doc.get("kind").and_then(|v| v.as_str()) != Some("kcs_histograms") {
        return bad("not a KCS histogram report".into());
    }
    let report: HistogramReport =
        serde_json::from_value(doc.clone()).map_err(|e| Error::Format(format!("report does not parse: {e}")))?;
    let mut last_slot = None;
    for g in &report.groups {
        let slot = g.label.map_or(NUM_CLASSES, |l| l.index());
        if last_slot.is_some_and(|s| s >= slot) {
            return bad("groups out of order or repeated".into());
        }
        last_slot = Some(slot);
        for e in &g.samples {
            if e.label != g.label {
                return bad(format!("{} filed under the wrong group", e.sample_id));
            }
            let sum: usize = e.histogram.iter().sum();
            if sum != e.k || e.k == 0 {
                return bad(format!("{}: histogram sums to {sum}, k = {}", e.sample_id, e.k));
            }
            let top = e.histogram.iter().rposition(|&c| c > 0).unwrap();
            if top != e.final_score.index() {
                return bad(format!("{}: final score is not the highest bin", e.sample_id));
            }
        }
    }
    Ok(())
}
