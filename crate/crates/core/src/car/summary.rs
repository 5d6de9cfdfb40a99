//! Posterior summaries, rate ratios, convergence checks and predicted counts.

use serde::Serialize;

use super::model::ModelSpec;
use super::sampler::PosteriorDraws;
use crate::error::{Error, Result};
use crate::io::TableWriter;
use crate::stats::{fmt_sig, mean, quantile, sd};

pub const MIN_DRAWS: usize = 100;
/// Chains with any monitored |z| above this are flagged.
pub const GEWEKE_LIMIT: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub geweke_z: f64,
}

impl ParamSummary {
    pub fn of(name: &str, xs: &[f64]) -> Self {
        ParamSummary {
            name: name.to_string(),
            mean: mean(xs),
            sd: sd(xs),
            q025: quantile(xs, 0.025),
            q975: quantile(xs, 0.975),
            geweke_z: geweke_z(xs),
        }
    }
}

/// Rate ratio for one coefficient: `exp` of the posterior mean and of the
/// percentile bounds, plus the posterior mean of `exp(beta)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mrr {
    pub name: String,
    pub mrr: f64,
    pub lower: f64,
    pub upper: f64,
    pub exp_mean: f64,
}

impl Mrr {
    pub fn of(name: &str, xs: &[f64]) -> Self {
        Mrr {
            name: name.to_string(),
            mrr: mean(xs).exp(),
            lower: quantile(xs, 0.025).exp(),
            upper: quantile(xs, 0.975).exp(),
            exp_mean: xs.iter().map(|x| x.exp()).sum::<f64>() / xs.len() as f64,
        }
    }

    /// `point (lower,upper)` to two decimals.
    pub fn format(&self) -> String {
        format!("{:.2} ({:.2},{:.2})", self.mrr, self.lower, self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub source: String,
    pub n_draws: usize,
    pub coefficients: Vec<ParamSummary>,
    pub mrr: Vec<Mrr>,
    /// Variance and dependence parameters that were sampled.
    pub hyper: Vec<ParamSummary>,
    /// Parameters whose Geweke |z| exceeds the limit.
    pub flagged: Vec<String>,
    pub converged: bool,
}

impl FitSummary {
    /// One row per coefficient and sampled hyperparameter; rate-ratio
    /// columns are `NA` for the latter.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&[
            "param", "mean", "sd", "q025", "q975", "geweke_z", "mrr", "mrr_lower", "mrr_upper", "exp_mean", "mrr_ci",
        ]);
        let na = || "NA".to_string();
        for (i, p) in self.coefficients.iter().chain(&self.hyper).enumerate() {
            let m = self.mrr.get(i);
            w.row([
                p.name.clone(),
                fmt_sig(p.mean, 10),
                fmt_sig(p.sd, 10),
                fmt_sig(p.q025, 10),
                fmt_sig(p.q975, 10),
                fmt_sig(p.geweke_z, 6),
                m.map_or_else(na, |m| fmt_sig(m.mrr, 10)),
                m.map_or_else(na, |m| fmt_sig(m.lower, 10)),
                m.map_or_else(na, |m| fmt_sig(m.upper, 10)),
                m.map_or_else(na, |m| fmt_sig(m.exp_mean, 10)),
                m.map_or_else(na, |m| m.format()),
            ]);
        }
        w.into_bytes()
    }
}

/// Geweke statistic comparing the first 10% with the last 50% of a chain,
/// each segment's variance of the mean estimated from batch means.
pub fn geweke_z(xs: &[f64]) -> f64 {
    let n = xs.len();
    let a = &xs[..(n / 10).max(2).min(n)];
    let b = &xs[n - (n / 2).max(2).min(n)..];
    let var_of_mean = |seg: &[f64]| -> f64 {
        let k = ((seg.len() as f64).sqrt().floor() as usize).max(1);
        let size = seg.len() / k;
        if size < 1 || k < 2 {
            return crate::stats::sd(seg).powi(2) / seg.len() as f64;
        }
        let means: Vec<f64> = (0..k).map(|i| mean(&seg[i * size..(i + 1) * size])).collect();
        sd(&means).powi(2) / k as f64
    };
    let diff = mean(a) - mean(b);
    let v = var_of_mean(a) + var_of_mean(b);
    let scale = mean(a).abs().max(mean(b).abs()).max(1.0);
    if v <= (1e-12 * scale).powi(2) || !v.is_finite() {
        return if diff.abs() <= 1e-12 * scale { 0.0 } else { f64::INFINITY };
    }
    diff / v.sqrt()
}

/// Coefficient summaries, rate ratios and convergence diagnostics.
pub fn mrr_summary(draws: &PosteriorDraws) -> Result<FitSummary> {
    if draws.len() < MIN_DRAWS {
        return Err(Error::Model(format!("{} stored draws; at least {MIN_DRAWS} are needed", draws.len())));
    }
    let mut coefficients = Vec::new();
    let mut mrr = Vec::new();
    for (k, name) in draws.columns.iter().enumerate() {
        let xs = draws.coef(k);
        coefficients.push(ParamSummary::of(name, &xs));
        mrr.push(Mrr::of(name, &xs));
    }
    let mut hyper = Vec::new();
    for (name, xs) in [("tau2", &draws.tau2), ("sigma2", &draws.sigma2), ("rho", &draws.rho)] {
        if xs.iter().any(|v| *v != xs[0]) {
            hyper.push(ParamSummary::of(name, xs));
        }
    }
    let flagged: Vec<String> = coefficients
        .iter()
        .chain(&hyper)
        .filter(|p| !(p.geweke_z.abs() <= GEWEKE_LIMIT))
        .map(|p| p.name.clone())
        .collect();
    Ok(FitSummary {
        source: draws.source.clone(),
        n_draws: draws.len(),
        coefficients,
        mrr,
        hyper,
        converged: flagged.is_empty(),
        flagged,
    })
}

/// Predicted counts and SMRs per cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmrEstimates {
    pub source: String,
    pub units: Vec<String>,
    pub groups: Vec<String>,
    /// Per cell in `unit * G + group` order.
    pub expected: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Missing where the expected count is zero.
    pub smr: Vec<Option<f64>>,
}

impl SmrEstimates {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["unit_id", "group", "expected", "predicted", "smr"]);
        let g_n = self.groups.len();
        for (c, (&e, &p)) in self.expected.iter().zip(&self.predicted).enumerate() {
            let smr = self.smr[c].map(|v| fmt_sig(v, 10)).unwrap_or_else(|| "NA".into());
            w.row([
                self.units[c / g_n].as_str(),
                self.groups[c % g_n].as_str(),
                fmt_sig(e, 10).as_str(),
                fmt_sig(p, 10).as_str(),
                smr.as_str(),
            ]);
        }
        w.into_bytes()
    }
}

/// Posterior mean of `exp(x'beta + theta + phi + log P)` per included cell;
/// excluded cells predict zero events.
pub fn predict_counts(draws: &PosteriorDraws, spec: &ModelSpec) -> Result<SmrEstimates> {
    if draws.columns != spec.columns || draws.units != spec.units {
        return Err(Error::Model("draws were not produced from this model spec".into()));
    }
    if draws.is_empty() {
        return Err(Error::Model("no stored draws".into()));
    }
    let mut phi_col = vec![usize::MAX; spec.cells.len()];
    for (k, &c) in draws.phi_cells.iter().enumerate() {
        phi_col[c] = k;
    }
    let nd = draws.len() as f64;
    let mut predicted = vec![0.0; spec.cells.len()];
    let mut smr = vec![None; spec.cells.len()];
    for (c, cell) in spec.included() {
        let off = cell.offset();
        let mut acc = 0.0;
        for d in 0..draws.len() {
            let mut eta = spec.fixed(c, &draws.beta[d]) + off + draws.theta[d][cell.unit];
            if phi_col[c] != usize::MAX {
                eta += draws.phi[d][phi_col[c]];
            }
            acc += eta.exp();
        }
        predicted[c] = acc / nd;
        if !cell.floored {
            smr[c] = Some(predicted[c] / cell.expected);
        }
    }
    Ok(SmrEstimates {
        source: spec.source.clone(),
        units: spec.units.clone(),
        groups: spec.groups.clone(),
        expected: spec.cells.iter().map(|c| if c.floored { 0.0 } else { c.expected }).collect(),
        predicted,
        smr,
    })
}
