//! Unweighted average recall.

use crate::{Error, Result};

/// Recall of each class: correct predictions over the class's support.
pub fn per_class_recall(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut support = vec![0usize; classes];
    let mut correct = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        support[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    if let Some(absent) = support.iter().position(|&s| s == 0) {
        return Err(Error::EmptyClass(absent));
    }
    Ok(correct
        .iter()
        .zip(&support)
        .map(|(&c, &s)| c as f64 / s as f64)
        .collect())
}

/// Mean of the per-class recalls.
pub fn ua_recall(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    let r = per_class_recall(predictions, labels, classes)?;
    Ok(r.iter().sum::<f64>() / classes as f64)
}
