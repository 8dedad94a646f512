//! Evaluation metrics for imbalanced classification: per-class recall,
//! balanced accuracy (macro-averaged recall), and intra-class variance, the
//! Euclidean norm of deviations between overall accuracy and per-class
//! recalls. Low ICV means the classifier treats all classes about equally
//! well, which plain accuracy cannot see.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row `i`, column `j` counts samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Array2<u64>,
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = Array2::<u64>::zeros((k, k));
    for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        if p >= k || t >= k {
            return Err(Error::Validation(format!(
                "sample {i}: class out of range (pred {p}, label {t}, K = {k})"
            )));
        }
        counts[[t, p]] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }
}

/// Recall of each class; `None` marks a class absent from the evaluation set
/// (zero true samples), which is distinct from a recall of 0 and is excluded
/// from downstream means.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.k)
        .map(|i| {
            let row: u64 = cm.counts.row(i).sum();
            if row == 0 {
                None
            } else {
                Some(cm.counts[[i, i]] as f64 / row as f64)
            }
        })
        .collect()
}

/// Arithmetic mean of the recalls of present classes.
pub fn balanced_accuracy(recalls: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Validation("no class present in the evaluation set".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// `sqrt(Σ_i (acc − recall_i)²)` over present classes.
pub fn intra_class_variance(acc: f64, recalls: &[Option<f64>]) -> f64 {
    intra_class_variance_with(acc, recalls, true)
}

/// ICV with the square root made optional: `apply_sqrt = false` yields the
/// raw sum of squared deviations instead of its root.
pub fn intra_class_variance_with(acc: f64, recalls: &[Option<f64>], apply_sqrt: bool) -> f64 {
    let ss: f64 = recalls
        .iter()
        .flatten()
        .map(|r| (acc - r) * (acc - r))
        .sum();
    if apply_sqrt {
        ss.sqrt()
    } else {
        ss
    }
}

/// Plain accuracy: trace over total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation("empty confusion matrix".into()));
    }
    let correct: u64 = (0..cm.k).map(|i| cm.counts[[i, i]]).sum();
    Ok(correct as f64 / total as f64)
}

/// One experiment row: overall validation accuracy, per-class recalls,
/// balanced accuracy, and intra-class variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub validation_accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub balanced_accuracy: f64,
    pub icv: f64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport> {
        let validation_accuracy = accuracy(cm)?;
        let per_class_recall = per_class_recall(cm);
        let balanced_accuracy = balanced_accuracy(&per_class_recall)?;
        let icv = intra_class_variance(validation_accuracy, &per_class_recall);
        Ok(MetricsReport { validation_accuracy, per_class_recall, balanced_accuracy, icv })
    }

    /// Re-derives the aggregate fields from the stored recalls and checks
    /// they match, guarding serialized artifacts against drift.
    pub fn verify_consistent(&self) -> Result<()> {
        let bal = balanced_accuracy(&self.per_class_recall)?;
        if (bal - self.balanced_accuracy).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "balanced accuracy {} does not match recalls (expected {bal})",
                self.balanced_accuracy
            )));
        }
        let icv = intra_class_variance(self.validation_accuracy, &self.per_class_recall);
        if (icv - self.icv).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "icv {} does not match recalls (expected {icv})",
                self.icv
            )));
        }
        Ok(())
    }
}
