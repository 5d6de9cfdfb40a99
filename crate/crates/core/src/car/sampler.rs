//! Metropolis-within-Gibbs sampler for the spatial Poisson model.
//!
//! Each sweep updates, in order: coefficients by random walk, coefficient
//! and unit-effect translations that leave the linear predictor unchanged
//! (sampled exactly along the line), unit effects and cell effects by
//! random walk, the two variances from their inverse-gamma conditionals,
//! and the dependence parameter by a reflected random walk. The spatial
//! field is then recentred with the shift moved into the intercept.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::ModelSpec;
use crate::error::{Error, Result};
use crate::io::TableWriter;
use crate::rng;
use crate::stats::fmt_sig;

const TARGET_ACCEPT: f64 = 0.44;
const ADAPT_BATCH: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    /// Total sweeps, burn-in included.
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 10_000,
            burnin: 5_000,
            thin: 5,
            seed: 1,
        }
    }
}

impl McmcConfig {
    pub fn check(&self) -> Result<()> {
        if self.thin == 0 || self.burnin >= self.iterations {
            return Err(Error::Config(format!(
                "need thin >= 1 and burnin < iterations, got burnin {} of {} with thin {}",
                self.burnin, self.iterations, self.thin
            )));
        }
        Ok(())
    }

    pub fn n_stored(&self) -> usize {
        (self.iterations - self.burnin) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Mean post-burn-in acceptance rate per update block.
    pub acceptance: BTreeMap<String, f64>,
}

/// Stored iterations of one chain. Random effects are kept only for the
/// cells and units they apply to; `phi` follows `phi_cells`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub source: String,
    pub columns: Vec<String>,
    pub units: Vec<String>,
    /// Indices into the model's cells, one per column of `phi`.
    pub phi_cells: Vec<usize>,
    pub cell_labels: Vec<String>,
    pub beta: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub tau2: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub rho: Vec<f64>,
    pub meta: ChainMeta,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Draws of one coefficient.
    pub fn coef(&self, k: usize) -> Vec<f64> {
        self.beta.iter().map(|b| b[k]).collect()
    }

    /// One row per stored draw with named columns.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut header: Vec<String> = vec!["draw".into()];
        header.extend(self.columns.iter().map(|c| format!("beta[{c}]")));
        header.extend(["tau2".to_string(), "sigma2".into(), "rho".into()]);
        header.extend(self.units.iter().map(|u| format!("theta[{u}]")));
        header.extend(self.cell_labels.iter().map(|c| format!("phi[{c}]")));
        let refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut w = TableWriter::new(&refs);
        for d in 0..self.len() {
            let mut row = vec![d.to_string()];
            let vals = self.beta[d]
                .iter()
                .chain([&self.tau2[d], &self.sigma2[d], &self.rho[d]])
                .chain(&self.theta[d])
                .chain(&self.phi[d]);
            row.extend(vals.map(|v| fmt_sig(*v, 10)));
            w.row(row);
        }
        w.into_bytes()
    }
}

/// Random-walk step size with burn-in adaptation.
struct Step {
    log_s: f64,
    tried: u32,
    accepted: u32,
    kept_tried: u64,
    kept_accepted: u64,
}

impl Step {
    fn new(s: f64) -> Self {
        Step {
            log_s: s.max(1e-4).ln(),
            tried: 0,
            accepted: 0,
            kept_tried: 0,
            kept_accepted: 0,
        }
    }

    fn size(&self) -> f64 {
        self.log_s.exp()
    }

    fn record(&mut self, ok: bool, adapting: bool) {
        if adapting {
            self.tried += 1;
            self.accepted += ok as u32;
        } else {
            self.kept_tried += 1;
            self.kept_accepted += ok as u64;
        }
    }

    fn adapt(&mut self, batch: usize) {
        if self.tried == 0 {
            return;
        }
        let rate = self.accepted as f64 / self.tried as f64;
        let delta = (1.0 / (batch as f64).sqrt()).min(0.3);
        self.log_s += if rate > TARGET_ACCEPT { delta } else { -delta };
        self.tried = 0;
        self.accepted = 0;
    }

    fn rate(&self) -> Option<f64> {
        (self.kept_tried > 0).then(|| self.kept_accepted as f64 / self.kept_tried as f64)
    }
}

fn mean_rate(steps: &[Step]) -> Option<f64> {
    let r: Vec<f64> = steps.iter().filter_map(|s| s.rate()).collect();
    (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draw from an inverse gamma with the given shape and scale.
fn inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}

/// Run one chain. `y` holds a count for every cell of `spec` in cell order;
/// counts of excluded cells are ignored.
pub fn fit(y: &[u64], spec: &ModelSpec, mcmc: &McmcConfig) -> Result<PosteriorDraws> {
    mcmc.check()?;
    spec.options.check()?;
    if y.len() != spec.cells.len() {
        return Err(Error::Model(format!("{} counts for {} cells", y.len(), spec.cells.len())));
    }
    let opts = &spec.options;
    let graph = spec.graph.as_ref();
    let n = spec.n_units();
    let p = spec.n_coef();
    if opts.spatial && spec.columns.first().map(String::as_str) != Some("intercept") {
        return Err(Error::Model("a spatial model needs an intercept in the first column".into()));
    }

    // included cells, densely indexed
    let cells: Vec<usize> = spec.included().map(|(i, _)| i).collect();
    let m = cells.len();
    if m == 0 {
        return Err(Error::Model("no cells with a positive expected count".into()));
    }
    let ys: Vec<f64> = cells.iter().map(|&c| y[c] as f64).collect();
    let xs: Vec<&[f64]> = cells.iter().map(|&c| spec.cells[c].x.as_slice()).collect();
    let off: Vec<f64> = cells.iter().map(|&c| spec.cells[c].offset()).collect();
    let unit_of: Vec<usize> = cells.iter().map(|&c| spec.cells[c].unit).collect();
    let mut by_unit: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, &u) in unit_of.iter().enumerate() {
        by_unit[u].push(j);
    }
    let y_sum: f64 = ys.iter().sum();
    let p_sum: f64 = off.iter().map(|o| o.exp()).sum();
    if y_sum == 0.0 {
        return Err(Error::Model(
            "all included counts are zero; the intercept has no finite starting value".into(),
        ));
    }

    let mut rng = rng::stream(mcmc.seed, &["mcmc", &spec.source]);
    let mut beta = vec![0.0; p];
    beta[0] = (y_sum / p_sum).ln();
    let mut theta = vec![0.0; n];
    let mut phi = vec![0.0; m];
    let mut tau2 = opts.pin_tau2.unwrap_or(0.1);
    let mut sigma2 = opts.pin_sigma2.unwrap_or(0.1);
    let mut rho = if opts.spatial { opts.pin_rho.unwrap_or(0.5) } else { 0.0 };
    let row_sums = graph.row_sums();
    let beta_var = opts.priors.beta_var;

    let mut eta: Vec<f64> = (0..m)
        .map(|j| xs[j].iter().zip(&beta).map(|(x, b)| x * b).sum::<f64>() + off[j])
        .collect();
    let mu0: Vec<f64> = eta.iter().map(|e| e.exp()).collect();

    // curvature-based starting steps
    let mut beta_step: Vec<Step> = (0..p)
        .map(|k| {
            let info: f64 = (0..m).map(|j| xs[j][k] * xs[j][k] * mu0[j]).sum();
            Step::new(2.4 / (info + 1.0 / beta_var).sqrt())
        })
        .collect();
    let mut theta_step: Vec<Step> = (0..n)
        .map(|i| {
            let info: f64 = by_unit[i].iter().map(|&j| mu0[j]).sum::<f64>() + row_sums[i] / tau2;
            Step::new(2.4 / info.sqrt())
        })
        .collect();
    let mut phi_step: Vec<Step> = (0..m).map(|j| Step::new(2.4 / (mu0[j] + 1.0 / sigma2).sqrt())).collect();
    let mut rho_step = Step::new(0.2);

    let sample_tau2 = opts.spatial && opts.pin_tau2.is_none();
    let sample_sigma2 = opts.unstructured && opts.pin_sigma2.is_none();
    let sample_rho = opts.spatial && opts.pin_rho.is_none();
    let rho_cap = graph.rho_bound().min(1.0);

    let n_store = mcmc.n_stored();
    let mut out = PosteriorDraws {
        source: spec.source.clone(),
        columns: spec.columns.clone(),
        units: spec.units.clone(),
        phi_cells: if opts.unstructured { cells.clone() } else { Vec::new() },
        cell_labels: if opts.unstructured {
            cells
                .iter()
                .map(|&c| format!("{}:{}", spec.units[spec.cells[c].unit], spec.groups[spec.cells[c].group]))
                .collect()
        } else {
            Vec::new()
        },
        beta: Vec::with_capacity(n_store),
        theta: Vec::with_capacity(n_store),
        phi: Vec::with_capacity(n_store),
        tau2: Vec::with_capacity(n_store),
        sigma2: Vec::with_capacity(n_store),
        rho: Vec::with_capacity(n_store),
        meta: ChainMeta {
            iterations: mcmc.iterations,
            burnin: mcmc.burnin,
            thin: mcmc.thin,
            seed: mcmc.seed,
            acceptance: BTreeMap::new(),
        },
    };

    let mut batch = 0usize;
    for t in 0..mcmc.iterations {
        let adapting = t < mcmc.burnin;

        // coefficients
        for k in 0..p {
            let d = beta_step[k].size() * normal(&mut rng);
            let mut delta_ll = 0.0;
            for j in 0..m {
                let x = xs[j][k];
                if x != 0.0 {
                    let e = eta[j];
                    delta_ll += ys[j] * d * x - ((e + d * x).exp() - e.exp());
                }
            }
            let b = beta[k];
            let delta_lp = -((b + d) * (b + d) - b * b) / (2.0 * beta_var);
            let ok = (delta_ll + delta_lp) >= 0.0 || rng.random::<f64>().ln() < delta_ll + delta_lp;
            if ok {
                beta[k] += d;
                for j in 0..m {
                    let x = xs[j][k];
                    if x != 0.0 {
                        eta[j] += d * x;
                    }
                }
            }
            beta_step[k].record(ok, adapting);
        }

        // coefficient k against the cell effects: beta_k + s, phi_j - s x_jk
        if opts.unstructured {
            for k in 0..p {
                let (mut sxx, mut sxphi) = (0.0, 0.0);
                for j in 0..m {
                    sxx += xs[j][k] * xs[j][k];
                    sxphi += xs[j][k] * phi[j];
                }
                if sxx == 0.0 {
                    continue;
                }
                let prec = 1.0 / beta_var + sxx / sigma2;
                let mean = (-beta[k] / beta_var + sxphi / sigma2) / prec;
                let s = mean + normal(&mut rng) / prec.sqrt();
                beta[k] += s;
                for j in 0..m {
                    phi[j] -= s * xs[j][k];
                }
            }
        }

        // unit effects
        if opts.spatial {
            for i in 0..n {
                let (cm, cv) = graph.conditional(&theta, i, rho, tau2);
                if by_unit[i].is_empty() {
                    theta[i] = cm + cv.sqrt() * normal(&mut rng);
                    continue;
                }
                let d = theta_step[i].size() * normal(&mut rng);
                let mut delta_ll = 0.0;
                for &j in &by_unit[i] {
                    let e = eta[j];
                    delta_ll += ys[j] * d - ((e + d).exp() - e.exp());
                }
                let th = theta[i];
                let delta_lp = -((th + d - cm).powi(2) - (th - cm).powi(2)) / (2.0 * cv);
                let r = delta_ll + delta_lp;
                let ok = r >= 0.0 || rng.random::<f64>().ln() < r;
                if ok {
                    theta[i] += d;
                    for &j in &by_unit[i] {
                        eta[j] += d;
                    }
                }
                theta_step[i].record(ok, adapting);
            }
            // unit effect against its cells' effects: theta_i + s, phi_j - s
            if opts.unstructured {
                for i in 0..n {
                    if by_unit[i].is_empty() {
                        continue;
                    }
                    let (cm, cv) = graph.conditional(&theta, i, rho, tau2);
                    let nj = by_unit[i].len() as f64;
                    let sphi: f64 = by_unit[i].iter().map(|&j| phi[j]).sum();
                    let prec = 1.0 / cv + nj / sigma2;
                    let mean = (-(theta[i] - cm) / cv + sphi / sigma2) / prec;
                    let s = mean + normal(&mut rng) / prec.sqrt();
                    theta[i] += s;
                    for &j in &by_unit[i] {
                        phi[j] -= s;
                    }
                }
            }
        }

        // cell effects
        if opts.unstructured {
            for j in 0..m {
                let d = phi_step[j].size() * normal(&mut rng);
                let e = eta[j];
                let delta_ll = ys[j] * d - ((e + d).exp() - e.exp());
                let f = phi[j];
                let delta_lp = -((f + d) * (f + d) - f * f) / (2.0 * sigma2);
                let r = delta_ll + delta_lp;
                let ok = r >= 0.0 || rng.random::<f64>().ln() < r;
                if ok {
                    phi[j] += d;
                    eta[j] += d;
                }
                phi_step[j].record(ok, adapting);
            }
        }

        // variances
        if sample_tau2 {
            let q = graph.quad_form(&theta, rho);
            tau2 = inv_gamma(opts.priors.tau2_shape + n as f64 / 2.0, opts.priors.tau2_scale + q / 2.0, &mut rng);
        }
        if sample_sigma2 {
            let ss: f64 = phi.iter().map(|f| f * f).sum();
            sigma2 = inv_gamma(
                opts.priors.sigma2_shape + m as f64 / 2.0,
                opts.priors.sigma2_scale + ss / 2.0,
                &mut rng,
            );
        }

        // dependence, reflected into [0, 1)
        if sample_rho {
            let cross = graph.cross(&theta);
            let log_target = |r: f64| 0.5 * graph.log_det(r) + r * cross / (2.0 * tau2);
            let mut prop = rho + rho_step.size() * normal(&mut rng);
            for _ in 0..64 {
                if prop < 0.0 {
                    prop = -prop;
                } else if prop > 1.0 {
                    prop = 2.0 - prop;
                } else {
                    break;
                }
            }
            let ok = if (0.0..rho_cap).contains(&prop) {
                let r = log_target(prop) - log_target(rho);
                r >= 0.0 || rng.random::<f64>().ln() < r
            } else {
                false
            };
            if ok {
                rho = prop;
            }
            rho_step.record(ok, adapting);
        }

        // recentre the spatial field into the intercept
        if opts.spatial {
            let shift = theta.iter().sum::<f64>() / n as f64;
            for th in theta.iter_mut() {
                *th -= shift;
            }
            beta[0] += shift;
        }

        if adapting && (t + 1) % ADAPT_BATCH == 0 {
            batch += 1;
            for s in beta_step.iter_mut().chain(theta_step.iter_mut()).chain(phi_step.iter_mut()) {
                s.adapt(batch);
            }
            rho_step.adapt(batch);
        }

        if t >= mcmc.burnin && (t + 1 - mcmc.burnin) % mcmc.thin == 0 {
            out.beta.push(beta.clone());
            out.theta.push(theta.clone());
            out.phi.push(if opts.unstructured { phi.clone() } else { Vec::new() });
            out.tau2.push(tau2);
            out.sigma2.push(sigma2);
            out.rho.push(rho);
        }
    }

    let acc = &mut out.meta.acceptance;
    if let Some(r) = mean_rate(&beta_step) {
        acc.insert("beta".into(), r);
    }
    if let Some(r) = mean_rate(&theta_step) {
        acc.insert("theta".into(), r);
    }
    if let Some(r) = mean_rate(&phi_step) {
        acc.insert("phi".into(), r);
    }
    if let Some(r) = rho_step.rate() {
        acc.insert("rho".into(), r);
    }
    if out.beta.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("the chain produced non-finite coefficients".into()));
    }
    Ok(out)
}
