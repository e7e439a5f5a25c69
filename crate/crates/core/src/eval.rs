//! Ranking and probabilistic metrics.

use crate::error::{Error, Result};

/// Predictions are clamped into this band before taking logs.
pub const PROB_CLAMP: f64 = 1e-10;

/// Scores paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidLabel(l.to_string()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("score"));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// (positives, negatives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }
}

/// Cross-entropy of one prediction, with the prediction clamped to
/// `[1e-10, 1 - 1e-10]`.
pub fn cross_entropy(y: f64, y_hat: f64) -> f64 {
    let p = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Area under the ROC curve through the Mann-Whitney rank statistic.
///
/// Tied scores share their average rank, so a positive/negative tie counts one half.
pub fn auc(scored: &ScoredSet) -> Result<f64> {
    let (pos, neg) = scored.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored.scores[a].total_cmp(&scored.scores[b]));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scored.scores[order[j]] == scored.scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: the tie group covers ranks i+1 ..= j
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let group_pos = order[i..j].iter().filter(|&&k| scored.labels[k] == 1).count();
        positive_rank_sum += avg_rank * group_pos as f64;
        i = j;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Mean clamped cross-entropy.
pub fn logloss(scored: &ScoredSet) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::EmptyDataset("log loss of an empty set"));
    }
    let total: f64 = scored
        .scores
        .iter()
        .zip(&scored.labels)
        .map(|(&s, &l)| cross_entropy(f64::from(l), s))
        .sum();
    Ok(total / scored.len() as f64)
}

/// Formats a metric the way result tables print it, e.g. `70.70%`.
pub fn format_percent(value: f64) -> String {
    format!("{:.2}%", value * 100.0)
}
