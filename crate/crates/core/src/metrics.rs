//! Offline ranking and calibration metrics.

use crate::error::{invalid, Error, Result};
use crate::tensor::bce_term;

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties credited one half.
///
/// Computed from the rank sum with average ranks for tied scores. Ranks
/// are tracked doubled so every intermediate value is an exact integer.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN score"));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum over positives of 2 * (average 1-based rank)
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i + j + 2) / 2
        let twice_avg = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

/// Mean clamped binary cross-entropy.
pub fn log_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_term(p, y as f64))
        .sum();
    Ok(total / scores.len() as f64)
}
