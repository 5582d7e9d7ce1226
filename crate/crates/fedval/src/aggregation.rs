//! Contribution-weight computation (FedAvg and performance weighting) and
//! weighted parameter averaging into the community model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelParams;

/// Raw contribution values p_k and their normalization p_k / P.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl WeightVector {
    fn from_raw(raw: Vec<f64>) -> Self {
        let total: f64 = raw.iter().sum();
        let normalized = raw.iter().map(|r| r / total).collect();
        Self { raw, normalized }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// FedAvg weighting: p_k is the learner's training-set size.
pub fn fedavg_weights(train_sizes: &[usize]) -> Result<WeightVector> {
    if train_sizes.is_empty() {
        return Err(Error::InvalidInput("no learners to weight".into()));
    }
    if train_sizes.contains(&0) {
        return Err(Error::InvalidInput("every training set must be nonempty".into()));
    }
    Ok(WeightVector::from_raw(train_sizes.iter().map(|&s| s as f64).collect()))
}

/// Performance weighting: p_k is the learner's distributed-validation
/// score, used as-is.
pub fn performance_weights(scores: &[f64]) -> Result<WeightVector> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no learners to weight".into()));
    }
    if let Some(&bad) = scores.iter().find(|s| s.is_nan() || **s < 0.0) {
        return Err(Error::InvalidInput(format!("negative or NaN score {bad}")));
    }
    if scores.iter().all(|&s| s == 0.0) {
        return Err(Error::DegenerateWeights { round: 0 });
    }
    Ok(WeightVector::from_raw(scores.to_vec()))
}

/// Weighted average of the local models, summed in ascending learner-id
/// order so the float reduction is bit-reproducible.
pub fn weighted_average(models: &[ModelParams], weights: &WeightVector) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| Error::InvalidInput("no models to average".into()))?;
    if models.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if models.iter().any(|m| m.arch != first.arch) {
        return Err(Error::InvalidInput("models have mismatched architectures".into()));
    }
    let mut values = vec![0.0f64; first.values.len()];
    for (model, &w) in models.iter().zip(&weights.normalized) {
        for (out, &v) in values.iter_mut().zip(&model.values) {
            *out += w * v;
        }
    }
    Ok(ModelParams { values, arch: first.arch.clone() })
}
