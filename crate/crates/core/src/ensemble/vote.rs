//! Combining per-slice probabilities into one decision per scan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub subject_id: String,
    pub scan_id: String,
    /// Class-1 probability from each slice model, by slice position.
    pub slice_probs: Vec<f64>,
    pub ensemble_prob: f64,
    pub ensemble_label: usize,
    pub true_label: usize,
}

/// Argmax of a two-class softmax: an exact 0.5 goes to class 0.
pub fn slice_label(prob: f64) -> usize {
    usize::from(prob > 0.5)
}

/// Majority vote of per-slice labels; an even split goes to class 1 when the
/// mean probability is at least 0.5. Returns `(label, mean probability)`.
///
/// The label and the mean are deliberately independent: six votes at 0.6
/// and four at 0.1 give label 1 with mean 0.4.
pub fn majority_vote(probs: &[f64]) -> Result<(usize, f64)> {
    if probs.is_empty() {
        return Err(Error::invalid("majority_vote", "no slice probabilities"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid("majority_vote", format!("probability {p} outside [0, 1]")));
    }
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    let ones = probs.iter().filter(|&&p| slice_label(p) == 1).count();
    let label = match (2 * ones).cmp(&probs.len()) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => usize::from(mean >= 0.5),
    };
    Ok((label, mean))
}

/// Builds the record for one scan; `probs` must hold one entry per slice model.
pub fn ensemble_predict(
    subject_id: &str,
    scan_id: &str,
    true_label: usize,
    probs: &[Option<f64>],
) -> Result<PredictionRecord> {
    let missing: Vec<usize> = probs.iter().enumerate().filter(|(_, p)| p.is_none()).map(|(i, _)| i).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("scan {scan_id}: no prediction for slice(s) {missing:?}")));
    }
    let slice_probs: Vec<f64> = probs.iter().map(|p| p.expect("checked")).collect();
    let (ensemble_label, ensemble_prob) = majority_vote(&slice_probs)?;
    Ok(PredictionRecord {
        subject_id: subject_id.into(),
        scan_id: scan_id.into(),
        slice_probs,
        ensemble_prob,
        ensemble_label,
        true_label,
    })
}
