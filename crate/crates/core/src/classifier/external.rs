//! Externally computed per-PSS probabilities, one JSON object per line:
//! `{"sample_id":"...","pss_index":0,"probs":[p0,p1,p2,p3]}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prediction::Prediction;
use crate::error::{Error, Result};
use crate::inference::ConfidenceRule;
use crate::score::NUM_CLASSES;

/// Rows whose probabilities miss 1 by at most this much are rescaled.
const RENORMALIZE_TOL: f64 = 1e-4;
const EXACT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRow {
    pub sample_id: String,
    pub pss_index: usize,
    pub probs: [f64; NUM_CLASSES],
}

impl From<&Prediction> for PredictionRow {
    fn from(p: &Prediction) -> Self {
        Self {
            sample_id: p.sample_id.clone(),
            pss_index: p.pss_index,
            probs: p.probs,
        }
    }
}

fn normalize(probs: [f64; NUM_CLASSES]) -> std::result::Result<[f64; NUM_CLASSES], String> {
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(format!("probabilities must be finite and nonnegative: {probs:?}"));
    }
    let sum: f64 = probs.iter().sum();
    let off = (sum - 1.0).abs();
    if off <= EXACT_TOL {
        Ok(probs)
    } else if off <= RENORMALIZE_TOL {
        Ok(probs.map(|p| p / sum))
    } else {
        Err(format!("probabilities sum to {sum}"))
    }
}

/// Parses prediction rows from `reader`; `path` only labels errors.
/// Blank lines are skipped. Each sample's list is ordered by `pss_index`.
pub fn read_predictions_jsonl(
    reader: impl BufRead,
    path: impl AsRef<Path>,
    rule: ConfidenceRule,
) -> Result<BTreeMap<String, Vec<Prediction>>> {
    let path = path.as_ref();
    let mut out: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, format!("malformed row: {e}")))?;
        let probs = normalize(row.probs).map_err(|m| Error::parse(path, lineno, m))?;
        let pred = Prediction::new(row.sample_id, row.pss_index, probs, rule)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let list = out.entry(pred.sample_id.clone()).or_default();
        if list.iter().any(|p| p.pss_index == pred.pss_index) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate ({:?}, {})", pred.sample_id, pred.pss_index),
            ));
        }
        list.push(pred);
    }
    for list in out.values_mut() {
        list.sort_by_key(|p| p.pss_index);
    }
    Ok(out)
}

pub fn load_external_predictions(
    path: impl AsRef<Path>,
    rule: ConfidenceRule,
) -> Result<BTreeMap<String, Vec<Prediction>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions_jsonl(BufReader::new(file), path, rule)
}

/// Writes rows in iteration order, one per line.
pub fn write_predictions_jsonl<'a>(
    preds: impl IntoIterator<Item = &'a Prediction>,
    mut writer: impl Write,
) -> std::io::Result<()> {
    for p in preds {
        let line = serde_json::to_string(&PredictionRow::from(p)).map_err(std::io::Error::other)?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::Her2Score;

    fn read(text: &str) -> Result<BTreeMap<String, Vec<Prediction>>> {
        read_predictions_jsonl(text.as_bytes(), "mem.jsonl", ConfidenceRule::Top1)
    }

    #[test]
    fn empty_file_is_empty_map() {
        assert!(read("").unwrap().is_empty());
        assert!(read("\n\n").unwrap().is_empty());
    }

    #[test]
    fn orders_by_index_and_derives_fields() {
        let text = r#"{"sample_id":"a","pss_index":1,"probs":[0.1,0.1,0.1,0.7]}
{"sample_id":"a","pss_index":0,"probs":[0.7,0.1,0.1,0.1]}
{"sample_id":"b","pss_index":0,"probs":[0.25,0.25,0.25,0.25]}
"#;
        let map = read(text).unwrap();
        let a = &map["a"];
        assert_eq!(a[0].pss_index, 0);
        assert_eq!(a[0].argmax_score, Her2Score::Zero);
        assert_eq!(a[0].confidence, 0.7);
        assert_eq!(a[1].argmax_score, Her2Score::Three);
        assert_eq!(map["b"].len(), 1);
    }

    #[test]
    fn renormalizes_small_drift_only() {
        let map = read(r#"{"sample_id":"a","pss_index":0,"probs":[0.40004,0.2,0.2,0.2]}"#).unwrap();
        let s: f64 = map["a"][0].probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let err = read(r#"{"sample_id":"a","pss_index":0,"probs":[0.5,0.2,0.2,0.2]}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dup = "{\"sample_id\":\"a\",\"pss_index\":0,\"probs\":[1,0,0,0]}\n\n{\"sample_id\":\"a\",\"pss_index\":0,\"probs\":[1,0,0,0]}\n";
        assert!(matches!(read(dup), Err(Error::Parse { line: 3, .. })));
        let bad = "{\"sample_id\":\"a\",\"pss_index\":0,\"probs\":[1,0,0]}";
        assert!(matches!(read(bad), Err(Error::Parse { line: 1, .. })));
        let neg = "{\"sample_id\":\"a\",\"pss_index\":0,\"probs\":[1.1,-0.1,0,0]}";
        assert!(matches!(read(neg), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read("not json"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn write_read_write_is_stable() {
        let text = "{\"sample_id\":\"x\",\"pss_index\":0,\"probs\":[0.1,0.2,0.30000000000000004,0.4]}\n";
        let map = read(text).unwrap();
        let mut out = Vec::new();
        write_predictions_jsonl(map.values().flatten(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
