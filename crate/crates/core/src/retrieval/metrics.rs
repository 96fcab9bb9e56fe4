use std::collections::BTreeSet;

use super::RetrievalError;

/// Mean reciprocal rank of 1-based ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64, RetrievalError> {
    if ranks.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    assert!(ranks.iter().all(|&r| r >= 1), "ranks are 1-based");
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of ranks within the top `k`.
pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if ranks.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes present in `labels`
/// (0/0 counts as 0), plus accuracy.
pub fn f1_macro<T: Ord>(predictions: &[T], labels: &[T]) -> Result<(f64, f64), RetrievalError> {
    if predictions.len() != labels.len() {
        return Err(RetrievalError::ShapeMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    let classes: BTreeSet<&T> = labels.iter().collect();
    let mut total = 0.0;
    for class in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (p, l) in predictions.iter().zip(labels) {
            match (p == *class, l == *class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        total += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok((total / classes.len() as f64, correct as f64 / labels.len() as f64))
}

/// Expected MRR when the target's rank is uniform on `1..=n`: `H(n) / n`.
pub fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}

/// Standard deviation of the mean reciprocal rank over `queries`
/// independent uniform ranks on `1..=n`.
pub fn random_mrr_std(n: usize, queries: usize) -> f64 {
    let mean = random_mrr(n);
    let second = (1..=n).map(|k| 1.0 / (k * k) as f64).sum::<f64>() / n as f64;
    ((second - mean * mean) / queries as f64).sqrt()
}
