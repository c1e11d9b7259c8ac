use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{Her2Score, NUM_CLASSES};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; NUM_CLASSES]);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self([1.0; NUM_CLASSES])
    }

    pub fn new(w: [f64; NUM_CLASSES]) -> Result<Self> {
        if w.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::Domain(format!("class weights must be finite and positive: {w:?}")));
        }
        Ok(Self(w))
    }

    pub fn get(&self, class: Her2Score) -> f64 {
        self.0[class.index()]
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(self.0.map(|w| w * alpha))
    }

    /// Same proportions, rescaled so the weights sum to the class count.
    pub fn sum_normalized(&self) -> Self {
        let s: f64 = self.0.iter().sum();
        Self(self.0.map(|w| w * NUM_CLASSES as f64 / s))
    }
}

/// `w_c = total / (C · count_c)`. The count-weighted mean of these weights
/// is exactly 1, so the weighted loss keeps the scale of plain cross-entropy
/// over the training distribution.
pub fn inverse_frequency_weights(class_counts: [usize; NUM_CLASSES]) -> Result<ClassWeights> {
    if let Some(class) = class_counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateClass { class });
    }
    let total: usize = class_counts.iter().sum();
    ClassWeights::new(class_counts.map(|c| total as f64 / (NUM_CLASSES * c) as f64))
}

/// `L = -(1/m) Σ_i Σ_c w_c y_ic ln p_ic` with one-hot `y`.
pub fn weighted_cross_entropy(probs: &[[f64; NUM_CLASSES]], labels: &[Her2Score], weights: &ClassWeights) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::Arity(format!("{} probability rows for {} labels", probs.len(), labels.len())));
    }
    let mut total = 0.0;
    for (row, &label) in probs.iter().zip(labels) {
        if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain(format!("invalid probability in {row:?}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("probabilities sum to {sum}")));
        }
        total -= weights.get(label) * row[label.index()].max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}
