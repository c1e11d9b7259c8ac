//! Scoring protocol: N PSS predictions per core, keep the k most confident
//! (the KCS), report the ordinal maximum of their argmax scores.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{MicroCnn, Prediction, Real};
use crate::error::{Error, Result};
use crate::imaging::Raster;
use crate::pss::{batch_seed, PatchOrigin, PssConfig, PssSource, PyramidSamplingSet};
use crate::score::{Her2Score, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceRule {
    /// Largest class probability.
    #[default]
    Top1,
    /// Largest minus second-largest probability.
    Margin,
}

impl ConfidenceRule {
    pub fn name(self) -> &'static str {
        match self {
            ConfidenceRule::Top1 => "top1",
            ConfidenceRule::Margin => "margin",
        }
    }
}

impl fmt::Display for ConfidenceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfidenceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(ConfidenceRule::Top1),
            "margin" => Ok(ConfidenceRule::Margin),
            other => Err(Error::Config(format!("unknown confidence rule {other:?}"))),
        }
    }
}

const SIMPLEX_TOL: f64 = 1e-6;

pub fn check_simplex(probs: &[f64; NUM_CLASSES]) -> Result<()> {
    if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
        return Err(Error::Domain(format!("not a probability vector: {probs:?}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

pub fn confidence(probs: &[f64; NUM_CLASSES], rule: ConfidenceRule) -> Result<f64> {
    check_simplex(probs)?;
    let mut sorted = *probs;
    sorted.sort_by(|a, b| b.total_cmp(a));
    let c = match rule {
        ConfidenceRule::Top1 => sorted[0],
        ConfidenceRule::Margin => sorted[0] - sorted[1],
    };
    Ok(c.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub n: usize,
    pub k: usize,
    pub confidence_rule: ConfidenceRule,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n: 20,
            k: 5,
            confidence_rule: ConfidenceRule::Top1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n {
            return Err(Error::Config(format!("need 1 <= k <= n, got n={} k={}", self.n, self.k)));
        }
        Ok(())
    }
}

/// Descending confidence, then ascending `pss_index`.
pub fn kcs_order(a: &Prediction, b: &Prediction) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.pss_index.cmp(&b.pss_index))
}

/// The `k` most confident predictions, sorted by [`kcs_order`].
pub fn select_kcs(preds: &[Prediction], k: usize) -> Result<Vec<Prediction>> {
    if k > preds.len() {
        return Err(Error::Arity(format!("k = {k} exceeds {} predictions", preds.len())));
    }
    let mut sorted: Vec<Prediction> = preds.to_vec();
    sorted.sort_by(kcs_order);
    sorted.truncate(k);
    Ok(sorted)
}

/// Ordinal maximum of the argmax scores.
pub fn final_score(kcs: &[Prediction]) -> Result<Her2Score> {
    kcs.iter()
        .map(|p| p.argmax_score)
        .max()
        .ok_or_else(|| Error::Arity("empty KCS".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KcsResult {
    pub selected: Vec<Prediction>,
    pub final_score: Her2Score,
    pub histogram: [usize; NUM_CLASSES],
}

pub fn aggregate(preds: &[Prediction], k: usize) -> Result<KcsResult> {
    let selected = select_kcs(preds, k)?;
    let final_score = final_score(&selected)?;
    let mut histogram = [0; NUM_CLASSES];
    for p in &selected {
        histogram[p.argmax_score.index()] += 1;
    }
    Ok(KcsResult {
        selected,
        final_score,
        histogram,
    })
}

/// Anything that maps a PSS to four class probabilities.
pub trait PssClassifier: Sync {
    fn input_channels(&self) -> usize;
    fn predict(&self, pss: &PyramidSamplingSet) -> Result<[f64; NUM_CLASSES]>;
}

impl<T: Real> PssClassifier for MicroCnn<T> {
    fn input_channels(&self) -> usize {
        MicroCnn::input_channels(self)
    }

    fn predict(&self, pss: &PyramidSamplingSet) -> Result<[f64; NUM_CLASSES]> {
        let p = self.forward(pss)?;
        Ok(p.map(|v| v.to_f64().unwrap_or(f64::NAN)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcsEntry {
    pub pss_index: usize,
    pub probs: [f64; NUM_CLASSES],
    pub confidence: f64,
    pub argmax: Her2Score,
}

/// Machine-readable per-core report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreReport {
    pub sample_id: String,
    pub n: usize,
    pub k: usize,
    pub confidence_rule: ConfidenceRule,
    pub final_score: Her2Score,
    pub kcs: Vec<KcsEntry>,
    pub histogram: [usize; NUM_CLASSES],
}

impl CoreReport {
    pub fn new(sample_id: impl Into<String>, cfg: &InferenceConfig, kcs: &KcsResult) -> Self {
        Self {
            sample_id: sample_id.into(),
            n: cfg.n,
            k: cfg.k,
            confidence_rule: cfg.confidence_rule,
            final_score: kcs.final_score,
            kcs: kcs
                .selected
                .iter()
                .map(|p| KcsEntry {
                    pss_index: p.pss_index,
                    probs: p.probs,
                    confidence: p.confidence,
                    argmax: p.argmax_score,
                })
                .collect(),
            histogram: kcs.histogram,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

/// Protocol output plus everything needed to audit it.
#[derive(Debug, Clone)]
pub struct ScoredCore {
    pub report: CoreReport,
    pub kcs: KcsResult,
    pub predictions: Vec<Prediction>,
    pub provenance: Vec<Vec<PatchOrigin>>,
}

/// Builds `cfg.n` PSSs (element `i` seeded with `batch_seed(seed, i)`),
/// classifies each and aggregates the KCS.
pub fn score_core(
    core: &Raster,
    classifier: &dyn PssClassifier,
    pss_cfg: &PssConfig,
    cfg: &InferenceConfig,
    seed: u64,
    sample_id: &str,
) -> Result<ScoredCore> {
    cfg.validate()?;
    if classifier.input_channels() != pss_cfg.stacked_channels() {
        return Err(Error::Shape(format!(
            "classifier takes {} channels, PSS config stacks {}",
            classifier.input_channels(),
            pss_cfg.stacked_channels()
        )));
    }
    let source = PssSource::new(core, *pss_cfg)?;
    let scored: Vec<(Prediction, Vec<PatchOrigin>)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let pss = source.sample(batch_seed(seed, i))?;
            let probs = classifier.predict(&pss)?;
            let pred = Prediction::from_model_output(sample_id, i, probs, cfg.confidence_rule)?;
            Ok((pred, pss.provenance))
        })
        .collect::<Result<_>>()?;
    let (predictions, provenance): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let kcs = aggregate(&predictions, cfg.k)?;
    Ok(ScoredCore {
        report: CoreReport::new(sample_id, cfg, &kcs),
        kcs,
        predictions,
        provenance,
    })
}

/// Protocol over externally computed predictions: the first `cfg.n` by
/// `pss_index`, with confidence recomputed under `cfg.confidence_rule`.
pub fn score_external(sample_id: &str, preds: &[Prediction], cfg: &InferenceConfig) -> Result<(CoreReport, KcsResult)> {
    cfg.validate()?;
    if preds.len() < cfg.n {
        return Err(Error::Arity(format!(
            "sample {sample_id} has {} predictions, n = {}",
            preds.len(),
            cfg.n
        )));
    }
    let mut ordered: Vec<&Prediction> = preds.iter().collect();
    ordered.sort_by_key(|p| p.pss_index);
    let used: Vec<Prediction> = ordered[..cfg.n]
        .iter()
        .map(|p| Prediction::new(sample_id, p.pss_index, p.probs, cfg.confidence_rule))
        .collect::<Result<_>>()?;
    let kcs = aggregate(&used, cfg.k)?;
    Ok((CoreReport::new(sample_id, cfg, &kcs), kcs))
}
