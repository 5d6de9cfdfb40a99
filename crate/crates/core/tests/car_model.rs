use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use privmap::car::{
    fit, mrr_summary, predict_counts, sample_car_prior, CarGraph, ChainMeta, McmcConfig, ModelOptions, ModelSpec,
    Mrr, PosteriorDraws,
};
use privmap::geo::{build_synthetic_geography, Layout};
use privmap::rng;
use privmap::standardize::ExpectedCounts;
use privmap::stats::mean;
use privmap::tabulation::{Covariates, GroupSchema};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

fn no_effects() -> ModelOptions {
    ModelOptions {
        spatial: false,
        unstructured: false,
        ..ModelOptions::default()
    }
}

/// Poisson GLM with log link and offsets by iteratively reweighted least
/// squares.
fn irls(x: &[Vec<f64>], y: &[f64], offset: &[f64]) -> Vec<f64> {
    let n = x.len();
    let p = x[0].len();
    let xm = DMatrix::from_fn(n, p, |i, k| x[i][k]);
    let mut beta = DVector::<f64>::zeros(p);
    beta[0] = (y.iter().sum::<f64>() / offset.iter().map(|o| o.exp()).sum::<f64>()).ln();
    for _ in 0..100 {
        let eta = &xm * &beta;
        let mu: Vec<f64> = (0..n).map(|i| (eta[i] + offset[i]).exp()).collect();
        let z = DVector::from_fn(n, |i, _| eta[i] + (y[i] - mu[i]) / mu[i]);
        let w = DMatrix::from_diagonal(&DVector::from_vec(mu));
        let xtw = xm.transpose() * w;
        let next = (&xtw * &xm).lu().solve(&(&xtw * z)).unwrap();
        let change = (&next - &beta).amax();
        beta = next;
        if change < 1e-12 {
            break;
        }
    }
    beta.iter().copied().collect()
}

fn glm_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<u64>) {
    let mut r = rng::stream(seed, &["glm-data"]);
    let beta = [0.0, 0.4, 0.01];
    let mut rows = Vec::new();
    let mut expected = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let black = (i % 2) as f64;
        let pov = r.random_range(-15.0..15.0);
        let p: f64 = r.random_range(2.0..30.0);
        let lam = p * (beta[0] + beta[1] * black + beta[2] * pov).exp();
        y.push(Poisson::new(lam).unwrap().sample(&mut r) as u64);
        rows.push(vec![1.0, black, pov]);
        expected.push(p);
    }
    (rows, expected, y)
}

fn columns() -> Vec<String> {
    vec!["intercept".into(), "group:Black".into(), "prop_pov".into()]
}

#[test]
fn null_data_recovers_zero_intercept() {
    let mut r = rng::stream(2, &["null"]);
    let n = 200;
    let expected: Vec<f64> = (0..n).map(|_| r.random_range(5.0..40.0)).collect();
    let y: Vec<u64> = expected.iter().map(|p: &f64| p.round() as u64).collect();
    let oracle = (y.iter().sum::<u64>() as f64 / expected.iter().sum::<f64>()).ln();
    let opts = ModelOptions {
        covariates: Vec::new(),
        pin_tau2: Some(1e-6),
        pin_sigma2: Some(1e-6),
        ..ModelOptions::default()
    };
    let spec = ModelSpec::from_rows(vec!["intercept".into()], vec![vec![1.0]; n], expected, opts).unwrap();
    let mcmc = McmcConfig {
        iterations: 4000,
        burnin: 2000,
        thin: 2,
        seed: 3,
    };
    let draws = fit(&y, &spec, &mcmc).unwrap();
    let b0 = mean(&draws.coef(0));
    assert!(oracle.abs() < 0.01);
    assert!((b0 - 0.0).abs() < 0.03, "beta0 {b0}");
}

#[test]
fn glm_reduction_matches_irls() {
    let (rows, expected, y) = glm_data(500, 11);
    let mle = irls(&rows, &y.iter().map(|&v| v as f64).collect::<Vec<_>>(), &expected.iter().map(|p| p.ln()).collect::<Vec<_>>());
    let spec = ModelSpec::from_rows(columns(), rows, expected, no_effects()).unwrap();
    let mcmc = McmcConfig {
        iterations: 8000,
        burnin: 3000,
        thin: 5,
        seed: 4,
    };
    let draws = fit(&y, &spec, &mcmc).unwrap();
    let s = mrr_summary(&draws).unwrap();
    for k in 0..3 {
        let c = &s.coefficients[k];
        assert!((c.mean - mle[k]).abs() <= 3.0 * c.sd, "{}: {} vs {} (sd {})", c.name, c.mean, mle[k], c.sd);
    }
}

#[test]
fn stored_draw_count_and_reproducibility() {
    let (rows, expected, y) = glm_data(60, 1);
    let spec = ModelSpec::from_rows(columns(), rows, expected, no_effects()).unwrap();
    let mcmc = McmcConfig {
        iterations: 1000,
        burnin: 400,
        thin: 3,
        seed: 9,
    };
    let a = fit(&y, &spec, &mcmc).unwrap();
    let b = fit(&y, &spec, &mcmc).unwrap();
    assert_eq!(a.len(), 200);
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn all_zero_counts_reported() {
    let spec = ModelSpec::from_rows(vec!["intercept".into()], vec![vec![1.0]; 5], vec![1e6; 5], no_effects()).unwrap();
    let mcmc = McmcConfig {
        iterations: 100,
        burnin: 50,
        thin: 1,
        seed: 1,
    };
    assert!(fit(&[0; 5], &spec, &mcmc).is_err());
}

struct SpatialData {
    ec: ExpectedCounts,
    cov: Covariates,
    graph: Arc<CarGraph>,
    y: Vec<u64>,
}

fn spatial_data(n_leaves: usize, seed: u64) -> SpatialData {
    let branching = [4, n_leaves.div_ceil(4)];
    let (h, adj) = build_synthetic_geography(n_leaves, &branching, Layout::Grid, seed).unwrap();
    let ids = h.leaf_ids();
    let adj = adj.reordered(&ids).unwrap();
    let mut r = rng::stream(seed, &["spatial-data"]);
    let theta = sample_car_prior(&adj, 0.2, 1.0, &mut r).unwrap();
    let pov: Vec<f64> = (0..n_leaves).map(|_| r.random_range(0.02..0.35)).collect();
    let pov_mean = mean(&pov);
    let mut values = Vec::new();
    let mut y = Vec::new();
    for i in 0..n_leaves {
        for g in 0..2 {
            let p: f64 = if g == 0 { r.random_range(20.0..60.0) } else { r.random_range(3.0..12.0) };
            let phi = 0.5 * r.sample::<f64, _>(rand_distr::StandardNormal);
            let eta = 0.4 * g as f64 + 0.01 * (pov[i] - pov_mean) * 100.0 + theta[i] + phi;
            y.push(Poisson::new(p * eta.exp()).unwrap().sample(&mut r) as u64);
            values.push(p);
        }
    }
    let ec = ExpectedCounts::new("truth", ids.clone(), GroupSchema::nhw_black(), values).unwrap();
    let cov = Covariates {
        units: ids,
        names: vec!["prop_pov".into()],
        values: pov.iter().map(|&v| vec![v]).collect(),
    };
    SpatialData {
        ec,
        cov,
        graph: Arc::new(CarGraph::new(adj).unwrap()),
        y,
    }
}

fn short_chain(seed: u64) -> McmcConfig {
    McmcConfig {
        iterations: 4000,
        burnin: 2000,
        thin: 4,
        seed,
    }
}

#[test]
fn spatial_fit_recovers_group_effect() {
    let d = spatial_data(120, 5);
    let spec = ModelSpec::build(&d.ec, &d.cov, d.graph.clone(), ModelOptions::default()).unwrap();
    let draws = fit(&d.y, &spec, &short_chain(1)).unwrap();
    let s = mrr_summary(&draws).unwrap();
    let b1 = &s.coefficients[1];
    assert!((b1.mean - 0.4).abs() < 3.0 * b1.sd + 0.05, "beta1 {} sd {}", b1.mean, b1.sd);
    assert!(draws.tau2.iter().all(|v| *v > 0.0));
    assert!(draws.rho.iter().all(|v| (0.0..1.0).contains(v)));
    // recentred field
    assert!(draws.theta.iter().all(|t| mean(t).abs() < 1e-9));
}

#[test]
fn offset_invariance() {
    let d = spatial_data(80, 6);
    let c = 2.5f64;
    let scaled = ExpectedCounts::new("truth", d.ec.units.clone(), d.ec.groups.clone(), d.ec.values.iter().map(|v| v * c).collect())
        .unwrap();
    let a = fit(&d.y, &ModelSpec::build(&d.ec, &d.cov, d.graph.clone(), ModelOptions::default()).unwrap(), &short_chain(7)).unwrap();
    let b = fit(&d.y, &ModelSpec::build(&scaled, &d.cov, d.graph.clone(), ModelOptions::default()).unwrap(), &short_chain(7)).unwrap();
    let (sa, sb) = (mrr_summary(&a).unwrap(), mrr_summary(&b).unwrap());
    let shift = sb.coefficients[0].mean - sa.coefficients[0].mean;
    assert!((shift + c.ln()).abs() <= 2.0 * sa.coefficients[0].sd, "intercept shift {shift}");
    for k in 1..3 {
        let diff = sb.coefficients[k].mean - sa.coefficients[k].mean;
        assert!(diff.abs() <= 2.0 * sa.coefficients[k].sd, "coef {k} moved by {diff}");
    }
}

#[test]
fn posterior_contracts_with_more_data() {
    let small = spatial_data(40, 8);
    let large = spatial_data(200, 8);
    let sd_of = |d: &SpatialData| {
        let spec = ModelSpec::build(&d.ec, &d.cov, d.graph.clone(), ModelOptions::default()).unwrap();
        mrr_summary(&fit(&d.y, &spec, &short_chain(2)).unwrap()).unwrap().coefficients[1].sd
    };
    assert!(sd_of(&large) < sd_of(&small));
}

fn chain(values: Vec<f64>) -> PosteriorDraws {
    let n = values.len();
    PosteriorDraws {
        source: "x".into(),
        columns: vec!["group:Black".into()],
        units: vec!["a".into()],
        phi_cells: Vec::new(),
        cell_labels: Vec::new(),
        beta: values.into_iter().map(|v| vec![v]).collect(),
        theta: vec![vec![0.0]; n],
        phi: vec![Vec::new(); n],
        tau2: vec![1.0; n],
        sigma2: vec![1.0; n],
        rho: vec![0.0; n],
        meta: ChainMeta {
            iterations: n,
            burnin: 0,
            thin: 1,
            seed: 0,
            acceptance: BTreeMap::new(),
        },
    }
}

#[test]
fn constant_chain_mrr() {
    let s = mrr_summary(&chain(vec![0.4; 200])).unwrap();
    let m = &s.mrr[0];
    assert!((m.mrr - 1.4918).abs() < 1e-4);
    assert!((m.lower - m.mrr).abs() < 1e-12 && (m.upper - m.mrr).abs() < 1e-12);
    assert!(s.converged);
}

#[test]
fn alternating_chain_exp_mean() {
    let xs: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 0.0 } else { 0.8 }).collect();
    let s = mrr_summary(&chain(xs)).unwrap();
    let hand = (1.0 + 0.8f64.exp()) / 2.0;
    assert!((s.mrr[0].exp_mean - hand).abs() < 1e-12);
    assert!((s.mrr[0].mrr - 0.4f64.exp()).abs() < 1e-12);
}

#[test]
fn too_few_draws_rejected() {
    assert!(mrr_summary(&chain(vec![0.1; 99])).is_err());
}

#[test]
fn interval_bounds_ordered() {
    let mut r = rng::stream(1, &["chains"]);
    for _ in 0..1000 {
        let xs: Vec<f64> = (0..120).map(|_| r.random_range(-2.0..2.0)).collect();
        let s = mrr_summary(&chain(xs)).unwrap();
        let m = &s.mrr[0];
        assert!(m.lower <= m.upper && m.mrr > 0.0);
        assert!(s.coefficients[0].q025 <= s.coefficients[0].q975);
    }
}

#[test]
fn drifting_chain_flagged() {
    let xs: Vec<f64> = (0..400).map(|i| i as f64 / 100.0).collect();
    let s = mrr_summary(&chain(xs)).unwrap();
    assert!(!s.converged);
    assert_eq!(s.flagged, vec!["group:Black".to_string()]);
}

#[test]
fn mrr_format() {
    let m = Mrr {
        name: "group:Black".into(),
        mrr: 1.1612,
        lower: 1.0581,
        upper: 1.2904,
        exp_mean: 1.17,
    };
    assert_eq!(m.format(), "1.16 (1.06,1.29)");
}

#[test]
fn predictions_average_draws() {
    let d = spatial_data(30, 3);
    let spec = ModelSpec::build(&d.ec, &d.cov, d.graph.clone(), ModelOptions::default()).unwrap();
    let mcmc = McmcConfig {
        iterations: 700,
        burnin: 300,
        thin: 4,
        seed: 5,
    };
    let draws = fit(&d.y, &spec, &mcmc).unwrap();
    assert_eq!(draws.len(), 100);
    let est = predict_counts(&draws, &spec).unwrap();
    for (c, cell) in spec.cells.iter().enumerate() {
        let direct: f64 = (0..draws.len())
            .map(|t| {
                let eta: f64 = cell.x.iter().zip(&draws.beta[t]).map(|(x, b)| x * b).sum::<f64>()
                    + draws.theta[t][cell.unit]
                    + draws.phi[t][c]
                    + cell.expected.ln();
                eta.exp()
            })
            .sum::<f64>()
            / draws.len() as f64;
        assert!((est.predicted[c] - direct).abs() <= 1e-12 * direct.max(1.0));
        assert!((est.smr[c].unwrap() - est.predicted[c] / cell.expected).abs() < 1e-12);
    }
}

#[test]
fn degenerate_draw_predicts_expected() {
    let d = spatial_data(20, 4);
    let spec = ModelSpec::build(&d.ec, &d.cov, d.graph.clone(), ModelOptions::default()).unwrap();
    let n_cells = spec.cells.len();
    let draws = PosteriorDraws {
        source: "truth".into(),
        columns: spec.columns.clone(),
        units: spec.units.clone(),
        phi_cells: (0..n_cells).collect(),
        cell_labels: vec![String::new(); n_cells],
        beta: vec![vec![0.0; 3]],
        theta: vec![vec![0.0; 20]],
        phi: vec![vec![0.0; n_cells]],
        tau2: vec![1.0],
        sigma2: vec![1.0],
        rho: vec![0.2],
        meta: ChainMeta {
            iterations: 1,
            burnin: 0,
            thin: 1,
            seed: 0,
            acceptance: BTreeMap::new(),
        },
    };
    let est = predict_counts(&draws, &spec).unwrap();
    for c in 0..n_cells {
        assert!((est.predicted[c] - spec.cells[c].expected).abs() < 1e-9);
        assert!((est.smr[c].unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_expected_gives_missing_smr() {
    let mut d = spatial_data(20, 4);
    d.ec.values[1] = 0.0;
    let spec = ModelSpec::build(&d.ec, &d.cov, d.graph.clone(), ModelOptions::default()).unwrap();
    let mcmc = McmcConfig {
        iterations: 500,
        burnin: 200,
        thin: 3,
        seed: 5,
    };
    let est = predict_counts(&fit(&d.y, &spec, &mcmc).unwrap(), &spec).unwrap();
    assert_eq!(est.smr[1], None);
    assert_eq!(est.predicted[1], 0.0);
}
