//! Proper conditionally autoregressive prior with precision `(D - rho W) / scale`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geo::Adjacency;

/// Adjacency with the quantities the prior needs precomputed.
#[derive(Debug, Clone)]
pub struct CarGraph {
    adj: Adjacency,
    row_sums: Vec<f64>,
    /// Eigenvalues of `D^-1/2 W D^-1/2`.
    eigen: Vec<f64>,
}

impl CarGraph {
    pub fn new(adj: Adjacency) -> Result<Self> {
        let row_sums = adj.row_sums();
        if let Some(i) = row_sums.iter().position(|&w| w <= 0.0) {
            return Err(Error::Model(format!("unit `{}` has no neighbours", adj.ids()[i])));
        }
        let n = adj.len();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for &(k, w) in adj.neighbors(i) {
                m[(i, k)] = w / (row_sums[i] * row_sums[k]).sqrt();
            }
        }
        let eigen = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        Ok(CarGraph { adj, row_sums, eigen })
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adj
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    /// Largest admissible dependence, `1 / lambda_max`.
    pub fn rho_bound(&self) -> f64 {
        1.0 / self.eigen.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// `log det(D - rho W)`.
    pub fn log_det(&self, rho: f64) -> f64 {
        let d: f64 = self.row_sums.iter().map(|w| w.ln()).sum();
        d + self.eigen.iter().map(|l| (1.0 - rho * l).ln()).sum::<f64>()
    }

    /// `sum_i sum_k w_ik theta_i theta_k`.
    pub fn cross(&self, theta: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| theta[i] * self.adj.neighbors(i).iter().map(|&(k, w)| w * theta[k]).sum::<f64>())
            .sum()
    }

    /// `theta' D theta`.
    pub fn diag(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.row_sums).map(|(t, w)| w * t * t).sum()
    }

    /// `theta' (D - rho W) theta`.
    pub fn quad_form(&self, theta: &[f64], rho: f64) -> f64 {
        self.diag(theta) - rho * self.cross(theta)
    }

    /// Weighted neighbour mean `sum_k w_ik theta_k / w_i+`.
    pub fn neighbour_mean(&self, theta: &[f64], i: usize) -> f64 {
        self.adj.neighbors(i).iter().map(|&(k, w)| w * theta[k]).sum::<f64>() / self.row_sums[i]
    }

    /// Full conditional of `theta_i`: mean `rho * neighbour mean`, variance
    /// `scale / w_i+`.
    pub fn conditional(&self, theta: &[f64], i: usize, rho: f64, scale: f64) -> (f64, f64) {
        (rho * self.neighbour_mean(theta, i), scale / self.row_sums[i])
    }

    pub fn precision(&self, rho: f64, scale: f64) -> DMatrix<f64> {
        let n = self.len();
        let mut q = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            q[(i, i)] = self.row_sums[i] / scale;
            for &(k, w) in self.adj.neighbors(i) {
                q[(i, k)] -= rho * w / scale;
            }
        }
        q
    }
}

/// Prior with a fixed dependence and scale, factorised for joint draws.
#[derive(Debug, Clone)]
pub struct CarPrior {
    /// Upper-triangular factor `U` with `Q = U' U`.
    upper: DMatrix<f64>,
}

impl CarPrior {
    pub fn new(graph: &CarGraph, rho: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Model(format!("CAR scale must be positive, got {scale}")));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Model(format!("CAR dependence must lie in [0, 1), got {rho}")));
        }
        let chol = graph
            .precision(rho, scale)
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("CAR precision is not positive definite at rho = {rho}")))?;
        Ok(CarPrior {
            upper: chol.l().transpose(),
        })
    }

    /// `theta = U^-1 z` has covariance `(U' U)^-1 = Q^-1`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.upper.nrows();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        self.upper
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal")
            .iter()
            .copied()
            .collect()
    }
}

/// One exact joint draw from the prior.
pub fn sample_car_prior<R: Rng + ?Sized>(adj: &Adjacency, rho: f64, scale: f64, rng: &mut R) -> Result<Vec<f64>> {
    let graph = CarGraph::new(adj.clone())?;
    Ok(CarPrior::new(&graph, rho, scale)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{build_synthetic_geography, Layout};
    use crate::rng;

    fn path2() -> Adjacency {
        Adjacency::from_edges(vec!["a".into(), "b".into()], &[(0, 1)]).unwrap()
    }

    #[test]
    fn two_node_covariance_by_hand() {
        let g = CarGraph::new(path2()).unwrap();
        let cov = g.precision(0.2, 1.0).try_inverse().unwrap();
        let f = 1.0 / (1.0 - 0.04);
        assert!((cov[(0, 0)] - f).abs() < 1e-12);
        assert!((cov[(0, 1)] - 0.2 * f).abs() < 1e-12);
        assert!((cov[(0, 0)] - 1.041_666_666_7).abs() < 1e-9);
    }

    #[test]
    fn log_det_matches_dense() {
        let (_, adj) = build_synthetic_geography(12, &[2, 6], Layout::Grid, 0).unwrap();
        let g = CarGraph::new(adj).unwrap();
        for rho in [0.0, 0.2, 0.9] {
            let dense = g.precision(rho, 1.0).determinant().ln();
            assert!((g.log_det(rho) - dense).abs() < 1e-9);
        }
        assert!((g.rho_bound() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_matches_precision() {
        // for a Gaussian with precision Q: mean_i = -sum_{k != i} Q_ik x_k / Q_ii, var = 1 / Q_ii
        let (_, adj) = build_synthetic_geography(9, &[3, 3], Layout::Grid, 0).unwrap();
        let g = CarGraph::new(adj).unwrap();
        let theta: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let (rho, scale) = (0.3, 0.7);
        let q = g.precision(rho, scale);
        for i in 0..9 {
            let (m, v) = g.conditional(&theta, i, rho, scale);
            let mq = -(0..9).filter(|&k| k != i).map(|k| q[(i, k)] * theta[k]).sum::<f64>() / q[(i, i)];
            assert!((m - mq).abs() < 1e-12);
            assert!((v - 1.0 / q[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_when_rho_zero() {
        let g = CarGraph::new(path2()).unwrap();
        let cov = g.precision(0.0, 2.0).try_inverse().unwrap();
        assert_eq!(cov[(0, 1)], 0.0);
        assert_eq!(cov[(0, 0)], 2.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = CarGraph::new(path2()).unwrap();
        assert!(CarPrior::new(&g, 1.0, 1.0).is_err());
        assert!(CarPrior::new(&g, 0.2, 0.0).is_err());
        let island = Adjacency::from_edges(vec!["a".into(), "b".into(), "c".into()], &[(0, 1)]).unwrap();
        assert!(CarGraph::new(island).is_err());
    }

    #[test]
    fn draws_reproducible() {
        let mut r1 = rng::stream(5, &["car"]);
        let mut r2 = rng::stream(5, &["car"]);
        assert_eq!(
            sample_car_prior(&path2(), 0.2, 1.0, &mut r1).unwrap(),
            sample_car_prior(&path2(), 0.2, 1.0, &mut r2).unwrap()
        );
    }
}
