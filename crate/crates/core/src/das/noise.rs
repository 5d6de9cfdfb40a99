//! Integer-valued noise for counting queries with unit sensitivity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// Two-sided geometric: P(X = k) proportional to exp(-eps |k|).
    #[default]
    DiscreteLaplace,
    /// Discrete Gaussian with sigma = 1/eps.
    DiscreteGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub family: NoiseFamily,
}

impl NoiseModel {
    pub fn new(family: NoiseFamily) -> Self {
        NoiseModel { family }
    }

    pub fn sample<R: Rng + ?Sized>(&self, eps: f64, rng: &mut R) -> i64 {
        match self.family {
            NoiseFamily::DiscreteLaplace => discrete_laplace(eps, rng),
            NoiseFamily::DiscreteGaussian => discrete_gaussian(1.0 / eps, rng),
        }
    }

    pub fn variance(&self, eps: f64) -> f64 {
        match self.family {
            NoiseFamily::DiscreteLaplace => discrete_laplace_variance(eps),
            NoiseFamily::DiscreteGaussian => discrete_gaussian_variance(1.0 / eps),
        }
    }
}

/// `n` i.i.d. draws at per-query budget `eps`.
pub fn sample_noise<R: Rng + ?Sized>(model: &NoiseModel, eps: f64, n: usize, rng: &mut R) -> Result<Vec<i64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("per-query epsilon must be positive and finite, got {eps}")));
    }
    Ok((0..n).map(|_| model.sample(eps, rng)).collect())
}

/// Geometric on {0, 1, ...} with P(G = k) = (1 - q) q^k, q = exp(-eps), by
/// inversion.
fn geometric<R: Rng + ?Sized>(eps: f64, rng: &mut R) -> i64 {
    // 1 - U lies in (0, 1], so the log is finite
    let u: f64 = 1.0 - rng.random::<f64>();
    (u.ln() / -eps).floor() as i64
}

/// Difference of two i.i.d. geometrics is two-sided geometric with the
/// same ratio.
pub fn discrete_laplace<R: Rng + ?Sized>(eps: f64, rng: &mut R) -> i64 {
    geometric(eps, rng) - geometric(eps, rng)
}

pub fn discrete_laplace_pmf(eps: f64, k: i64) -> f64 {
    let q = (-eps).exp();
    (1.0 - q) / (1.0 + q) * q.powi(k.unsigned_abs() as i32)
}

pub fn discrete_laplace_variance(eps: f64) -> f64 {
    let q = (-eps).exp();
    2.0 * q / ((1.0 - q) * (1.0 - q))
}

/// Exact rejection sampler built on discrete Laplace proposals with scale
/// t = floor(sigma) + 1.
pub fn discrete_gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> i64 {
    let t = sigma.floor() + 1.0;
    let s2 = sigma * sigma;
    loop {
        let y = discrete_laplace(1.0 / t, rng);
        let d = y.unsigned_abs() as f64 - s2 / t;
        let accept = (-(d * d) / (2.0 * s2)).exp();
        if rng.random::<f64>() < accept {
            return y;
        }
    }
}

pub fn discrete_gaussian_variance(sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let bound = (12.0 * sigma).ceil() as i64 + 2;
    let (mut z, mut m2) = (0.0, 0.0);
    for k in -bound..=bound {
        let w = (-((k * k) as f64) / (2.0 * s2)).exp();
        z += w;
        m2 += w * (k * k) as f64;
    }
    m2 / z
}
