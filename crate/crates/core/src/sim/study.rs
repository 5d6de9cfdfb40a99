//! Replicated comparison of denominator sources: simulate from the true
//! expected counts, fit once per source, and summarise coefficient and SMR
//! accuracy.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{DgpConfig, Dgp};
use super::metrics::{bias, mape, upward_fraction};
use crate::car::{fit, mrr_summary, predict_counts, CarGraph, McmcConfig, ModelOptions, ModelSpec};
use crate::error::{Error, Result};
use crate::io::{Table, TableWriter};
use crate::rng;
use crate::standardize::{below_five_fraction, underestimation_fraction, zero_fraction, ExpectedCounts};
use crate::stats::{fmt_sig, mean, sd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub mcmc: McmcConfig,
    pub model: ModelOptions,
    pub seed: u64,
}

/// Fit of one source to one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFit {
    /// Posterior means in design column order.
    pub beta: Vec<f64>,
    pub converged: bool,
    /// Estimated SMR per cell; missing where the source's expected count is 0.
    pub smr: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub k: usize,
    /// True SMR `lambda / P_truth` per cell; missing where `P_truth` is 0.
    pub true_smr: Vec<Option<f64>>,
    /// One entry per source, in source order.
    pub fits: Vec<SourceFit>,
}

/// Everything the report is computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySeries {
    pub sources: Vec<String>,
    pub columns: Vec<String>,
    pub true_beta: Vec<f64>,
    pub units: Vec<String>,
    pub groups: Vec<String>,
    pub replicates: Vec<ReplicateResult>,
}

fn check_sources(truth: &ExpectedCounts, sources: &[ExpectedCounts]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("a study needs at least one source".into()));
    }
    for (i, s) in sources.iter().enumerate() {
        if !s.aligned_with(truth) {
            return Err(Error::InvalidInput(format!("source `{}` is not aligned with `{}`", s.source, truth.source)));
        }
        if sources[..i].iter().any(|o| o.source == s.source) {
            return Err(Error::InvalidInput(format!("source `{}` listed twice", s.source)));
        }
    }
    Ok(())
}

/// Run every replicate. Replicates are independent jobs; results come back
/// in replicate order whatever the schedule.
pub fn run_study(
    cfg: &StudyConfig,
    truth: &ExpectedCounts,
    sources: &[ExpectedCounts],
    covariates: &crate::tabulation::Covariates,
    graph: Arc<CarGraph>,
    jobs: Option<usize>,
) -> Result<StudySeries> {
    check_sources(truth, sources)?;
    cfg.mcmc.check()?;
    let dgp = Dgp::new(cfg.dgp.clone(), truth, covariates, graph.clone(), &cfg.model, cfg.seed)?;
    // outcomes exist only where the true expected count is positive; every
    // source is fitted to those same cells
    let observed: Vec<bool> = dgp.spec().cells.iter().map(|c| c.included && !c.floored).collect();
    let specs: Vec<ModelSpec> = sources
        .iter()
        .map(|s| {
            let mut spec = ModelSpec::build(s, covariates, graph.clone(), cfg.model.clone())?;
            spec.restrict(&observed)?;
            Ok(spec)
        })
        .collect::<Result<_>>()?;
    let run_one = |k: usize| -> Result<ReplicateResult> {
        let data = dgp.generate(k);
        let true_smr = dgp
            .spec()
            .cells
            .iter()
            .zip(&data.lambda)
            .map(|(c, &l)| (c.included && !c.floored).then(|| l / c.expected))
            .collect();
        let mut fits = Vec::with_capacity(specs.len());
        for spec in &specs {
            let mcmc = McmcConfig {
                seed: rng::derive_seed(cfg.seed, &["fit", &k.to_string(), &spec.source]),
                ..cfg.mcmc.clone()
            };
            let draws = fit(&data.y, spec, &mcmc)?;
            let summary = mrr_summary(&draws)?;
            let est = predict_counts(&draws, spec)?;
            fits.push(SourceFit {
                beta: summary.coefficients.iter().map(|c| c.mean).collect(),
                converged: summary.converged,
                smr: est.smr,
            });
        }
        Ok(ReplicateResult { k, true_smr, fits })
    };
    let ks: Vec<usize> = (0..cfg.dgp.n_reps).collect();
    let replicates: Vec<ReplicateResult> = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {j} workers: {e}")))?
            .install(|| ks.par_iter().map(|&k| run_one(k)).collect::<Result<_>>())?,
        None => ks.par_iter().map(|&k| run_one(k)).collect::<Result<_>>()?,
    };
    Ok(StudySeries {
        sources: sources.iter().map(|s| s.source.clone()).collect(),
        columns: dgp.spec().columns.clone(),
        true_beta: cfg.dgp.beta.clone(),
        units: truth.units.clone(),
        groups: truth.groups.groups().to_vec(),
        replicates,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| "NA".into())
}

fn parse_opt(t: &Table, line: usize, s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| t.err(line, format!("not a number: `{s}`")))
}

impl StudySeries {
    /// Coefficient estimates: `k,source,coef,truth,estimate,converged`.
    pub fn replicates_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["k", "source", "coef", "truth", "estimate", "converged"]);
        for r in &self.replicates {
            for (s, f) in self.sources.iter().zip(&r.fits) {
                for (c, name) in self.columns.iter().enumerate() {
                    w.row([
                        r.k.to_string(),
                        s.clone(),
                        name.clone(),
                        format!("{}", self.true_beta[c]),
                        format!("{}", f.beta[c]),
                        f.converged.to_string(),
                    ]);
                }
            }
        }
        w.into_bytes()
    }

    /// SMR series: `k,source,unit_id,group,smr_est,smr_true`.
    pub fn smr_series_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["k", "source", "unit_id", "group", "smr_est", "smr_true"]);
        let g_n = self.groups.len();
        for r in &self.replicates {
            for (s, f) in self.sources.iter().zip(&r.fits) {
                for (c, est) in f.smr.iter().enumerate() {
                    w.row([
                        r.k.to_string(),
                        s.clone(),
                        self.units[c / g_n].clone(),
                        self.groups[c % g_n].clone(),
                        opt(*est),
                        opt(r.true_smr[c]),
                    ]);
                }
            }
        }
        w.into_bytes()
    }

    /// Rebuild a series from the two files written by `replicates_csv` and
    /// `smr_series_csv`.
    pub fn read(replicates: &Path, smr_series: &Path) -> Result<Self> {
        let rt = Table::read(replicates, &["k", "source", "coef", "truth", "estimate", "converged"])?;
        let st = Table::read(smr_series, &["k", "source", "unit_id", "group", "smr_est", "smr_true"])?;
        let mut sources: Vec<String> = Vec::new();
        let mut columns: Vec<String> = Vec::new();
        let mut true_beta: Vec<f64> = Vec::new();
        let mut units: Vec<String> = Vec::new();
        let mut groups: Vec<String> = Vec::new();
        let mut ks: Vec<usize> = Vec::new();
        let push = |v: &mut Vec<String>, s: &str| {
            if !v.iter().any(|x| x == s) {
                v.push(s.to_string());
            }
        };
        let k_of = |t: &Table, line: usize, s: &str| -> Result<usize> {
            s.parse().map_err(|_| t.err(line, format!("bad replicate index `{s}`")))
        };
        let mut beta: HashMap<(usize, String, String), (f64, bool)> = HashMap::new();
        for (line, rec) in &rt.rows {
            let k = k_of(&rt, *line, &rec[0])?;
            if !ks.contains(&k) {
                ks.push(k);
            }
            push(&mut sources, &rec[1]);
            if !columns.iter().any(|c| c == &rec[2]) {
                columns.push(rec[2].to_string());
                true_beta.push(rt.f64_at(*line, rec, 3)?);
            }
            let conv = match &rec[5] {
                "true" => true,
                "false" => false,
                other => return Err(rt.err(*line, format!("bad flag `{other}`"))),
            };
            beta.insert((k, rec[1].to_string(), rec[2].to_string()), (rt.f64_at(*line, rec, 4)?, conv));
        }
        for (_, rec) in &st.rows {
            push(&mut units, &rec[2]);
            push(&mut groups, &rec[3]);
        }
        let g_n = groups.len();
        let n_cells = units.len() * g_n;
        let unit_idx: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let mut smr: HashMap<(usize, String), (Vec<Option<f64>>, Vec<Option<f64>>)> = HashMap::new();
        for (line, rec) in &st.rows {
            let k = k_of(&st, *line, &rec[0])?;
            let c = unit_idx[&rec[2]] * g_n + groups.iter().position(|g| g == &rec[3]).expect("group seen");
            let entry = smr
                .entry((k, rec[1].to_string()))
                .or_insert_with(|| (vec![None; n_cells], vec![None; n_cells]));
            entry.0[c] = parse_opt(&st, *line, &rec[4])?;
            entry.1[c] = parse_opt(&st, *line, &rec[5])?;
        }
        let mut replicates = Vec::with_capacity(ks.len());
        for &k in &ks {
            let mut fits = Vec::with_capacity(sources.len());
            let mut true_smr = None;
            for s in &sources {
                let mut b = Vec::with_capacity(columns.len());
                let mut converged = true;
                for c in &columns {
                    let (v, conv) = *beta
                        .get(&(k, s.clone(), c.clone()))
                        .ok_or_else(|| Error::InvalidInput(format!("replicate {k} source {s} lacks coefficient {c}")))?;
                    b.push(v);
                    converged &= conv;
                }
                let (est, tru) = smr
                    .remove(&(k, s.clone()))
                    .ok_or_else(|| Error::InvalidInput(format!("replicate {k} source {s} has no SMR series")))?;
                true_smr.get_or_insert(tru);
                fits.push(SourceFit {
                    beta: b,
                    converged,
                    smr: est,
                });
            }
            replicates.push(ReplicateResult {
                k,
                true_smr: true_smr.unwrap_or_default(),
                fits,
            });
        }
        Ok(StudySeries {
            sources,
            columns,
            true_beta,
            units,
            groups,
            replicates,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefBias {
    pub source: String,
    pub coef: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mean_bias: f64,
    pub sd_estimate: f64,
    pub n_reps: usize,
    pub n_nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMetric {
    pub source: String,
    pub unit: String,
    pub group: String,
    pub bias: Option<f64>,
    pub mape: Option<f64>,
    /// Replicates with both an estimate and a truth.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetric {
    pub source: String,
    pub group: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub coef_bias: Vec<CoefBias>,
    pub cells: Vec<CellMetric>,
    pub fractions: Vec<GroupMetric>,
}

pub const MEAN_SMR_BIAS: &str = "mean_smr_bias";
pub const MEAN_SMR_MAPE: &str = "mean_smr_mape";
pub const UPWARD_BIAS_PCT: &str = "upward_bias_pct";
pub const UNDER_ESTIMATED_PCT: &str = "under_estimated_pct";
pub const ZERO_EXPECTED_PCT: &str = "zero_expected_pct";
pub const BELOW_FIVE_PCT: &str = "below5_expected_pct";
pub const NONCONVERGED_REPS: &str = "nonconverged_reps";

impl StudyReport {
    /// Aggregate a series. `expected` optionally supplies each source's
    /// expected counts and the truth for the denominator-level fractions.
    pub fn from_series(series: &StudySeries, expected: Option<(&ExpectedCounts, &[ExpectedCounts])>) -> Result<Self> {
        let g_n = series.groups.len();
        let n_cells = series.units.len() * g_n;
        let mut coef_bias = Vec::new();
        let mut cells = Vec::new();
        let mut fractions = Vec::new();
        for (s, name) in series.sources.iter().enumerate() {
            let nonconv = series.replicates.iter().filter(|r| !r.fits[s].converged).count();
            for (c, coef) in series.columns.iter().enumerate() {
                let est: Vec<f64> = series.replicates.iter().map(|r| r.fits[s].beta[c]).collect();
                let m = mean(&est);
                coef_bias.push(CoefBias {
                    source: name.clone(),
                    coef: coef.clone(),
                    truth: series.true_beta[c],
                    mean_estimate: m,
                    mean_bias: m - series.true_beta[c],
                    sd_estimate: if est.len() > 1 { sd(&est) } else { 0.0 },
                    n_reps: est.len(),
                    n_nonconverged: nonconv,
                });
            }
            let mut by_group_bias: Vec<Vec<f64>> = vec![Vec::new(); g_n];
            let mut by_group_mape: Vec<Vec<f64>> = vec![Vec::new(); g_n];
            for c in 0..n_cells {
                let (mut e, mut t) = (Vec::new(), Vec::new());
                for r in &series.replicates {
                    if let (Some(est), Some(tru)) = (r.fits[s].smr[c], r.true_smr[c]) {
                        e.push(est);
                        t.push(tru);
                    }
                }
                let b = bias(&e, &t);
                let m = mape(&e, &t);
                if let Some(b) = b {
                    by_group_bias[c % g_n].push(b);
                }
                if let Some(m) = m {
                    by_group_mape[c % g_n].push(m);
                }
                cells.push(CellMetric {
                    source: name.clone(),
                    unit: series.units[c / g_n].clone(),
                    group: series.groups[c % g_n].clone(),
                    bias: b,
                    mape: m,
                    n: e.len(),
                });
            }
            for (g, group) in series.groups.iter().enumerate() {
                let mut add = |metric: &str, value: f64| {
                    fractions.push(GroupMetric {
                        source: name.clone(),
                        group: group.clone(),
                        metric: metric.into(),
                        value,
                    })
                };
                add(MEAN_SMR_BIAS, mean(&by_group_bias[g]));
                add(MEAN_SMR_MAPE, mean(&by_group_mape[g]));
                add(UPWARD_BIAS_PCT, upward_fraction(&by_group_bias[g]));
                add(NONCONVERGED_REPS, nonconv as f64);
            }
            if let Some((truth, sources)) = expected {
                let ec = sources
                    .iter()
                    .find(|e| &e.source == name)
                    .ok_or_else(|| Error::InvalidInput(format!("no expected counts for source `{name}`")))?;
                let under = underestimation_fraction(ec, truth)?;
                let zero = zero_fraction(ec);
                let below = below_five_fraction(ec);
                for g in 0..g_n {
                    for (metric, v) in [
                        (UNDER_ESTIMATED_PCT, under[g].1),
                        (ZERO_EXPECTED_PCT, zero[g].1),
                        (BELOW_FIVE_PCT, below[g].1),
                    ] {
                        fractions.push(GroupMetric {
                            source: name.clone(),
                            group: series.groups[g].clone(),
                            metric: metric.into(),
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(StudyReport {
            coef_bias,
            cells,
            fractions,
        })
    }

    pub fn coef(&self, source: &str, coef: &str) -> Option<&CoefBias> {
        self.coef_bias.iter().find(|c| c.source == source && c.coef == coef)
    }

    pub fn metric(&self, source: &str, group: &str, metric: &str) -> Option<f64> {
        self.fractions
            .iter()
            .find(|m| m.source == source && m.group == group && m.metric == metric)
            .map(|m| m.value)
    }

    pub fn coef_bias_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&[
            "source",
            "coef",
            "truth",
            "mean_estimate",
            "mean_bias",
            "sd_estimate",
            "n_reps",
            "n_nonconverged",
        ]);
        for c in &self.coef_bias {
            w.row([
                c.source.clone(),
                c.coef.clone(),
                fmt_sig(c.truth, 10),
                fmt_sig(c.mean_estimate, 10),
                fmt_sig(c.mean_bias, 10),
                fmt_sig(c.sd_estimate, 10),
                c.n_reps.to_string(),
                c.n_nonconverged.to_string(),
            ]);
        }
        w.into_bytes()
    }

    fn cell_csv(&self, value: &str, pick: impl Fn(&CellMetric) -> Option<f64>) -> Vec<u8> {
        let mut w = TableWriter::new(&["source", "unit_id", "group", value, "n_reps"]);
        for c in &self.cells {
            w.row([
                c.source.clone(),
                c.unit.clone(),
                c.group.clone(),
                pick(c).map(|v| fmt_sig(v, 10)).unwrap_or_else(|| "NA".into()),
                c.n.to_string(),
            ]);
        }
        w.into_bytes()
    }

    pub fn smr_bias_csv(&self) -> Vec<u8> {
        self.cell_csv("bias", |c| c.bias)
    }

    pub fn smr_mape_csv(&self) -> Vec<u8> {
        self.cell_csv("mape", |c| c.mape)
    }

    pub fn fractions_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["source", "group", "metric", "value"]);
        for m in &self.fractions {
            w.row([m.source.clone(), m.group.clone(), m.metric.clone(), fmt_sig(m.value, 10)]);
        }
        w.into_bytes()
    }
}
