use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Recall per class; `None` for classes with no support.
    pub per_class_recall: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    /// Classes left out of the balanced accuracy for lack of support.
    pub excluded_classes: Vec<usize>,
}

/// Accuracy, balanced accuracy, per-class recall and confusion matrix.
pub fn metrics_report(preds: &[usize], labels: &[usize], k: usize) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(invalid("predictions and labels differ in length"));
    }
    if preds.is_empty() {
        return Err(invalid("no predictions"));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(invalid(format!("class index {bad} out of range for {k} classes")));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_recall: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let support: u64 = row.iter().sum();
            (support > 0).then(|| row[c] as f64 / support as f64)
        })
        .collect();
    let excluded_classes: Vec<usize> = (0..k).filter(|&c| per_class_recall[c].is_none()).collect();
    if !excluded_classes.is_empty() {
        log::warn!("classes without support excluded from balanced accuracy: {excluded_classes:?}");
    }
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    Ok(MetricsReport {
        accuracy: correct as f64 / preds.len() as f64,
        balanced_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class_recall,
        confusion,
        excluded_classes,
    })
}

/// Unweighted mean of per-class recall over classes with support.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    Ok(metrics_report(preds, labels, k)?.balanced_accuracy)
}
