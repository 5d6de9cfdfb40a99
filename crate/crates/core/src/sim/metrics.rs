//! Replicate-level accuracy metrics for SMR estimates.

/// Mean over replicates of `|(est - truth) / truth|`. `None` when the series
/// is empty or any truth is zero.
pub fn mape(est: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(est.len(), truth.len(), "series lengths differ");
    if est.is_empty() || truth.iter().any(|t| *t == 0.0) {
        return None;
    }
    Some(est.iter().zip(truth).map(|(e, t)| ((e - t) / t).abs()).sum::<f64>() / est.len() as f64)
}

/// Mean over replicates of `est - truth`. `None` for an empty series.
pub fn bias(est: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(est.len(), truth.len(), "series lengths differ");
    if est.is_empty() {
        return None;
    }
    Some(est.iter().zip(truth).map(|(e, t)| e - t).sum::<f64>() / est.len() as f64)
}

/// Percent of values strictly above zero.
pub fn upward_fraction(biases: &[f64]) -> f64 {
    if biases.is_empty() {
        return 0.0;
    }
    100.0 * biases.iter().filter(|b| **b > 0.0).count() as f64 / biases.len() as f64
}
