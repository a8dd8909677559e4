use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detection scores. Precision, recall and specificity treat every
/// non-zero label as the positive (anomalous) class and are `None` when
/// their denominator is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub classes: usize,
    pub support: u64,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Collapses labels to normal (0) vs anomalous (1).
pub fn two_class(labels: &[u8]) -> Vec<u8> {
    labels.iter().map(|l| (*l > 0) as u8).collect()
}

/// Majority label of each `window`-long slice, advancing by `stride`.
/// Ties go to the smaller label, so an even split counts as normal.
pub fn window_majority(labels: &[u8], window: usize, stride: usize) -> Result<Vec<u8>> {
    if window == 0 || stride == 0 {
        return Err(Error::Contract("window and stride must be positive".into()));
    }
    if labels.len() < window {
        return Ok(Vec::new());
    }
    Ok((0..=(labels.len() - window) / stride)
        .map(|k| {
            let slice = &labels[k * stride..k * stride + window];
            let mut counts = [0usize; 256];
            for l in slice {
                counts[*l as usize] += 1;
            }
            // max_by_key keeps the last maximum, so scan labels high to low
            (0..=255u8).rev().max_by_key(|l| counts[*l as usize]).unwrap_or(0)
        })
        .collect())
}

/// Scores `predicted` against `truth`. With `classes == 2` both streams are
/// collapsed to two-class first; otherwise every label must be below
/// `classes`.
pub fn score(predicted: &[u8], truth: &[u8], classes: usize) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    if classes < 2 {
        return Err(Error::Contract("need at least two classes".into()));
    }
    let (p, t) = if classes == 2 { (two_class(predicted), two_class(truth)) } else { (predicted.to_vec(), truth.to_vec()) };
    if let Some(bad) = p.iter().chain(&t).find(|l| **l as usize >= classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (p, t) in p.iter().zip(&t) {
        confusion[*t as usize][*p as usize] += 1;
        match (*t > 0, *p > 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let n = p.len() as u64;
    let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(Metrics {
        classes,
        support: n,
        accuracy: ratio(correct, n).unwrap_or(1.0),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        confusion,
    })
}
