//! Confusion-matrix construction/accumulation and the three performance
//! scores used for validation-weighted aggregation: micro accuracy, macro
//! accuracy, and the epsilon-corrected geometric mean.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{forward, ModelParams};

/// C x C integer count matrix, `counts[true][predicted]`. Row sums are the
/// per-class example counts; the diagonal holds the true positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn zero(num_classes: usize) -> Self {
        Self { counts: vec![0; num_classes * num_classes], num_classes }
    }

    pub fn from_counts(counts: Vec<u64>, num_classes: usize) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::InvalidInput(format!(
                "{} counts for a {num_classes}x{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { counts, num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.num_classes + predicted]
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.num_classes + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.counts[true_class * self.num_classes..(true_class + 1) * self.num_classes].iter().sum()
    }

    /// Per-class accuracy a_i = TP_i / m_i; a class with no examples
    /// contributes 0.
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|i| {
                let m = self.row_sum(i);
                if m == 0 {
                    0.0
                } else {
                    self.get(i, i) as f64 / m as f64
                }
            })
            .collect()
    }

    /// Entry-wise addition. Exact and order-independent (integer counts).
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::InvalidInput(format!(
                "cannot accumulate a {}x{0} matrix into a {}x{1} matrix",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Argmax prediction with ties broken by the lowest class index.
pub fn predict(params: &ModelParams, data: &LabeledDataset) -> Result<Vec<usize>> {
    let probs = forward(params, data.features(), data.len())?;
    let c = params.arch.num_classes;
    Ok((0..data.len())
        .map(|r| {
            let row = &probs[r * c..(r + 1) * c];
            let mut best = 0;
            for (j, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Confusion matrix of the model's argmax predictions over the dataset.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset) -> Result<ConfusionMatrix> {
    if data.num_classes() != params.arch.num_classes {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes, model has {}",
            data.num_classes(),
            params.arch.num_classes
        )));
    }
    let predictions = predict(params, data)?;
    let mut cm = ConfusionMatrix::zero(data.num_classes());
    for (&t, &p) in data.labels().iter().zip(&predictions) {
        cm.record(t, p);
    }
    Ok(cm)
}

/// Entry-wise sum of confusion matrices.
pub fn accumulate(cms: &[ConfusionMatrix]) -> Result<ConfusionMatrix> {
    let first =
        cms.first().ok_or_else(|| Error::InvalidInput("cannot accumulate zero matrices".into()))?;
    let mut out = ConfusionMatrix::zero(first.num_classes());
    for cm in cms {
        out.add(cm)?;
    }
    Ok(out)
}

fn require_nonempty(cm: &ConfusionMatrix) -> Result<u64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidInput("confusion matrix holds no examples".into()));
    }
    Ok(total)
}

/// Micro accuracy: total true positives over total examples.
pub fn micro_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = require_nonempty(cm)?;
    Ok(cm.trace() as f64 / total as f64)
}

/// Macro accuracy: unweighted mean of per-class accuracies. A class with no
/// examples contributes 0 and still divides by C.
pub fn macro_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    require_nonempty(cm)?;
    let accs = cm.per_class_accuracy();
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Geometric mean of per-class accuracies, substituting `epsilon` for any
/// class whose accuracy is exactly zero. Computed in log space.
pub fn gmean_score(cm: &ConfusionMatrix, epsilon: f64) -> Result<f64> {
    require_nonempty(cm)?;
    if epsilon <= 0.0 {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let accs = cm.per_class_accuracy();
    let log_sum: f64 = accs.iter().map(|&a| if a == 0.0 { epsilon.ln() } else { a.ln() }).sum();
    Ok((log_sum / accs.len() as f64).exp())
}

/// Which performance score weights the aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreKind {
    Micro,
    Macro,
    Gmean { epsilon: f64 },
}

impl ScoreKind {
    pub fn apply(&self, cm: &ConfusionMatrix) -> Result<f64> {
        match self {
            ScoreKind::Micro => micro_accuracy(cm),
            ScoreKind::Macro => macro_accuracy(cm),
            ScoreKind::Gmean { epsilon } => gmean_score(cm, *epsilon),
        }
    }
}
