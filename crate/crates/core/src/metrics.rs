//! Ranking metrics for binary classifiers.

use crate::error::{Error, Result};

/// Scores paired with 0/1 labels.
#[derive(Debug, Clone, Copy)]
pub struct ScoredLabels<'a> {
    scores: &'a [f64],
    labels: &'a [u8],
}

impl<'a> ScoredLabels<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::config("labels must be 0 or 1"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::UndefinedMetric("scores contain NaN".into()));
        }
        Ok(ScoredLabels { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half.
pub fn auc_roc(data: ScoredLabels<'_>) -> Result<f64> {
    let pos = data.positives() as u64;
    let neg = data.negatives() as u64;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUCROC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    // Twice the Mann-Whitney U, kept integral so the result is exact.
    let mut twice_u: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let score = data.scores[order[i]];
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && data.scores[order[j]] == score {
            if data.labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * negatives_below + n);
        negatives_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Average precision: mean over positives of the precision at each
/// positive's rank, ranking by descending score with ties in input order.
pub fn auc_pr(data: ScoredLabels<'_>) -> Result<f64> {
    let pos = data.positives();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUCPR needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    // stable sort keeps input order among ties
    order.sort_by(|&a, &b| data.scores[b].total_cmp(&data.scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if data.labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// Both metrics on raw slices.
pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let data = ScoredLabels::new(scores, labels)?;
    Ok((auc_roc(data)?, auc_pr(data)?))
}
