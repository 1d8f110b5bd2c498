use crate::error::{DtnError, Result};

/// Fraction of samples where `score >= threshold` agrees with `label == 1`.
pub fn accuracy(scores: &[f64], labels: &[usize], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(DtnError::Metric(format!(
            "accuracy needs matching non-empty inputs, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Area under the ROC curve via the Mann–Whitney statistic; ties earn half credit.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DtnError::Metric("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DtnError::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DtnError::Metric("auc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied (half-integer) average ranks exact.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean, times two: (i + j + 2).
        let avg2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += avg2 * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_and_orderings() {
        assert_eq!(auc(&[0.2, 0.2, 0.2, 0.2], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }
}
