//! Least-squares reconciliation of noisy children with a fixed parent.

use crate::error::{Error, Result};

/// Euclidean projection of `noisy` onto `{x >= 0, sum x = parent}`.
///
/// The KKT conditions give `x_c = max(noisy_c - tau, 0)` for a single
/// multiplier `tau`. Starting with every child active, `tau` is solved on
/// the active set and children that would go negative are clamped to zero
/// until no clamp is needed. Clamped children never re-enter because `tau`
/// only increases.
pub fn project_children(parent: f64, noisy: &[f64]) -> Vec<f64> {
    assert!(!noisy.is_empty(), "projection needs at least one child");
    assert!(parent >= 0.0, "parent value must be non-negative");
    let n = noisy.len();
    let mut active = vec![true; n];
    let mut tau;
    loop {
        let (sum, count) = noisy
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
        tau = (sum - parent) / count as f64;
        let mut changed = false;
        for (v, a) in noisy.iter().zip(active.iter_mut()) {
            if *a && v - tau <= 0.0 {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        if !active.iter().any(|&a| a) {
            // parent == 0 with every child at or below the threshold
            return vec![0.0; n];
        }
    }
    noisy
        .iter()
        .zip(&active)
        .map(|(&v, &a)| if a { v - tau } else { 0.0 })
        .collect()
}

/// Largest violation of the KKT system for the projection problem:
/// feasibility, sign of the bound multipliers and complementary slackness,
/// with `tau` recovered from the active children.
pub fn kkt_residual(parent: f64, noisy: &[f64], x: &[f64]) -> f64 {
    let scale = 1.0 + parent.abs() + noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let primal = (x.iter().sum::<f64>() - parent).abs();
    let neg = x.iter().fold(0.0f64, |m, &v| m.max(-v));
    let active: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 1e-12 * scale).collect();
    let tau = if active.is_empty() {
        // any tau >= max noisy works; take the smallest
        noisy.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    } else {
        active.iter().map(|&i| noisy[i] - x[i]).sum::<f64>() / active.len() as f64
    };
    let mut worst = primal.max(neg);
    for i in 0..x.len() {
        // stationarity: x - noisy + tau - mu = 0 with mu >= 0, mu x = 0
        let mu = x[i] - noisy[i] + tau;
        if active.contains(&i) {
            worst = worst.max(mu.abs());
        } else {
            worst = worst.max((-mu).max(0.0));
        }
    }
    worst / scale
}

/// Projection of a children x strata table onto non-negative tables with
/// the given row sums (child totals) and column sums (parent strata), by
/// Dykstra's alternating projections. Rows are exact on return; columns
/// agree to `tol`.
pub fn project_table(noisy: &[Vec<f64>], row_targets: &[f64], col_targets: &[f64], tol: f64) -> Result<Vec<Vec<f64>>> {
    let rows = noisy.len();
    let cols = col_targets.len();
    if row_targets.len() != rows || noisy.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput("table projection shape mismatch".into()));
    }
    let rs: f64 = row_targets.iter().sum();
    let cs: f64 = col_targets.iter().sum();
    if (rs - cs).abs() > 1e-9 * (1.0 + rs.abs()) {
        return Err(Error::InvalidInput(format!("row targets sum to {rs}, column targets to {cs}")));
    }
    let mut x: Vec<Vec<f64>> = noisy.to_vec();
    let mut p = vec![vec![0.0; cols]; rows];
    let mut q = vec![vec![0.0; cols]; rows];
    let max_iter = 20_000;
    for _ in 0..max_iter {
        // rows: {x >= 0, row sum fixed}
        let mut y = vec![vec![0.0; cols]; rows];
        for r in 0..rows {
            let shifted: Vec<f64> = (0..cols).map(|c| x[r][c] + p[r][c]).collect();
            y[r] = project_children(row_targets[r], &shifted);
            for c in 0..cols {
                p[r][c] = shifted[c] - y[r][c];
            }
        }
        let violation = (0..cols)
            .map(|c| ((0..rows).map(|r| y[r][c]).sum::<f64>() - col_targets[c]).abs())
            .fold(0.0f64, f64::max);
        if violation <= tol {
            return Ok(y);
        }
        // columns: affine, so spread each residual evenly
        for c in 0..cols {
            let shifted: Vec<f64> = (0..rows).map(|r| y[r][c] + q[r][c]).collect();
            let adj = (shifted.iter().sum::<f64>() - col_targets[c]) / rows as f64;
            for r in 0..rows {
                x[r][c] = shifted[r] - adj;
                q[r][c] = shifted[r] - x[r][c];
            }
        }
    }
    Err(Error::Numerical(format!("table projection did not converge in {max_iter} sweeps")))
}
