use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{confidence, ConfidenceRule};
use crate::score::{Her2Score, NUM_CLASSES};

/// One PSS's class probabilities with its derived label and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub pss_index: usize,
    pub probs: [f64; NUM_CLASSES],
    pub argmax_score: Her2Score,
    pub confidence: f64,
}

impl Prediction {
    /// Validates the simplex (±1e-6) and derives argmax and confidence.
    pub fn new(sample_id: impl Into<String>, pss_index: usize, probs: [f64; NUM_CLASSES], rule: ConfidenceRule) -> Result<Self> {
        let conf = confidence(&probs, rule)?;
        Ok(Self {
            sample_id: sample_id.into(),
            pss_index,
            probs,
            argmax_score: argmax(&probs),
            confidence: conf,
        })
    }

    pub fn from_model_output<T: num_traits::Float>(
        sample_id: impl Into<String>,
        pss_index: usize,
        probs: [T; NUM_CLASSES],
        rule: ConfidenceRule,
    ) -> Result<Self> {
        let p = probs.map(|v| v.to_f64().unwrap_or(f64::NAN));
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("non-finite model output {p:?}")));
        }
        Self::new(sample_id, pss_index, p, rule)
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64; NUM_CLASSES]) -> Her2Score {
    let mut best = 0;
    for i in 1..NUM_CLASSES {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    Her2Score::ALL[best]
}
