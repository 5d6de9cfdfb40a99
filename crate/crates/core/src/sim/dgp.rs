//! Forward simulation of event counts from the spatial Poisson model with
//! true expected counts as offsets.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::car::{CarGraph, CarPrior, ModelOptions, ModelSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::standardize::ExpectedCounts;
use crate::tabulation::Covariates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    /// Intercept, group indicator and covariate coefficients, in design
    /// column order.
    pub beta: Vec<f64>,
    /// CAR dependence; conditional means are `rho` times the neighbour mean.
    pub rho: f64,
    /// CAR conditional variance numerator: `scale / w_i+`.
    pub car_scale: f64,
    /// Variance of the unstructured cell effect.
    pub phi_var: f64,
    pub n_reps: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            beta: vec![0.0, 0.4, 0.01],
            rho: 0.2,
            car_scale: 1.0,
            phi_var: 0.25,
            n_reps: 100,
        }
    }
}

impl DgpConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.phi_var > 0.0 && self.phi_var.is_finite()) {
            return Err(Error::Config(format!("phi_var must be positive, got {}", self.phi_var)));
        }
        if self.n_reps == 0 {
            return Err(Error::Config("n_reps must be at least 1".into()));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }
}

/// One simulated dataset: counts and the rates they were drawn from, per
/// cell in `unit * G + group` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub y: Vec<u64>,
    pub lambda: Vec<f64>,
}

/// Design, offsets and factorised CAR prior shared by every replicate.
#[derive(Debug, Clone)]
pub struct Dgp {
    config: DgpConfig,
    spec: ModelSpec,
    prior: CarPrior,
    seed: u64,
}

impl Dgp {
    /// `options` supplies the covariates and their scaling so that the
    /// generating design matches the fitted one.
    pub fn new(
        config: DgpConfig,
        truth: &ExpectedCounts,
        covariates: &Covariates,
        graph: Arc<CarGraph>,
        options: &ModelOptions,
        seed: u64,
    ) -> Result<Self> {
        config.check()?;
        let spec = ModelSpec::build(truth, covariates, graph.clone(), options.clone())?;
        if spec.n_coef() != config.beta.len() {
            return Err(Error::Config(format!(
                "{} coefficients given for design columns {:?}",
                config.beta.len(),
                spec.columns
            )));
        }
        let prior = CarPrior::new(&graph, config.rho, config.car_scale)?;
        Ok(Dgp {
            config,
            spec,
            prior,
            seed,
        })
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Replicate `k`; depends only on the master seed and `k`. Cells with a
    /// zero true expected count get rate 0 and count 0.
    pub fn generate(&self, k: usize) -> Dataset {
        let mut r = rng::stream(self.seed, &["dgp", &k.to_string()]);
        let theta = self.prior.sample(&mut r);
        let sd_phi = self.config.phi_var.sqrt();
        let mut y = vec![0; self.spec.cells.len()];
        let mut lambda = vec![0.0; self.spec.cells.len()];
        for (c, cell) in self.spec.cells.iter().enumerate() {
            let phi = sd_phi * r.sample::<f64, _>(StandardNormal);
            if !cell.included || cell.floored {
                continue;
            }
            let eta = self.spec.fixed(c, &self.config.beta) + theta[cell.unit] + phi;
            lambda[c] = cell.expected * eta.exp();
            y[c] = Poisson::new(lambda[c]).expect("positive rate").sample(&mut r) as u64;
        }
        Dataset { k, y, lambda }
    }
}

/// One-off replicate without caching the prior factorisation.
pub fn generate_dataset(
    config: &DgpConfig,
    truth: &ExpectedCounts,
    covariates: &Covariates,
    graph: Arc<CarGraph>,
    options: &ModelOptions,
    seed: u64,
    k: usize,
) -> Result<Dataset> {
    Ok(Dgp::new(config.clone(), truth, covariates, graph, options, seed)?.generate(k))
}
