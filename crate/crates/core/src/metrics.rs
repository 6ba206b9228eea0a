//! Regression and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metrics {
    Regression {
        mae: f64,
        mse: f64,
    },
    Classification {
        accuracy: f64,
        balanced_accuracy: f64,
        macro_f1: f64,
    },
}

impl Metrics {
    /// The model-selection score: MSE (lower is better) or accuracy.
    pub fn primary(&self) -> f64 {
        match *self {
            Metrics::Regression { mse, .. } => mse,
            Metrics::Classification { accuracy, .. } => accuracy,
        }
    }

    pub fn better_than(&self, other: &Metrics) -> bool {
        match self {
            Metrics::Regression { .. } => self.primary() < other.primary(),
            Metrics::Classification { .. } => self.primary() > other.primary(),
        }
    }

    pub fn mse(&self) -> Option<f64> {
        match *self {
            Metrics::Regression { mse, .. } => Some(mse),
            Metrics::Classification { .. } => None,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        match *self {
            Metrics::Classification { accuracy, .. } => Some(accuracy),
            Metrics::Regression { .. } => None,
        }
    }
}

/// MAE and MSE averaged over every sample and output.
pub fn regression_metrics<R: AsRef<[f64]>>(pred: &[R], truth: &[R]) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != t.len() {
            return Err(Error::Invalid("prediction and target widths differ".into()));
        }
        for (a, b) in p.iter().zip(t) {
            abs += (a - b).abs();
            sq += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok(Metrics::Regression {
        mae: abs / n as f64,
        mse: sq / n as f64,
    })
}

/// Balanced accuracy averages recall over the classes present in `truth`;
/// macro F1 averages over all `classes`, an unseen and unpredicted class
/// scoring 0.
pub fn classification_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Data(format!("class id {c} outside 0..{classes}")));
    }
    let mut tp = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut true_count = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let accuracy = tp.iter().sum::<usize>() as f64 / pred.len() as f64;
    let present: Vec<usize> = (0..classes).filter(|&c| true_count[c] > 0).collect();
    let balanced_accuracy =
        present.iter().map(|&c| tp[c] as f64 / true_count[c] as f64).sum::<f64>() / present.len() as f64;
    let macro_f1 = (0..classes)
        .map(|c| {
            let denom = pred_count[c] + true_count[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / classes as f64;
    Ok(Metrics::Classification {
        accuracy,
        balanced_accuracy,
        macro_f1,
    })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
