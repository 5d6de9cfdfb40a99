//! Staged workflow over an output directory: geography and synthetic
//! tabulations, protection, standardisation, model fits, the simulation
//! study and its report. Every stage records its inputs, outputs and timing
//! in `manifest.json`.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    DasSection, GeoSection, IoSection, McmcSection, ModelSection, RunConfig, SimSection, StdSection, TRUTH,
};

use crate::car::{fit, mrr_summary, predict_counts, CarGraph, ModelSpec};
use crate::das::{check_consistency, run_topdown, Variant};
use crate::error::{Error, Result};
use crate::geo::{build_synthetic_geography, Adjacency, Hierarchy};
use crate::io::{sha256_file, write_atomic};
use crate::rng::derive_seed;
use crate::sim::{run_study, synthesize_population, StudyConfig, StudyReport, StudySeries};
use crate::standardize::{
    below_five_fraction, expected_counts, reference_rates, underestimation_fraction, zero_fraction, ExpectedCounts,
};
use crate::stats::fmt_sig;
use crate::tabulation::{Axes, Covariates, GroupSchema, TabulationCube};
use crate::io::TableWriter;

pub const MANIFEST: &str = "manifest.json";

pub const HIERARCHY: &str = "geo/hierarchy.csv";
pub const ADJACENCY: &str = "geo/adjacency.csv";
pub const POPULATION: &str = "data/population.csv";
pub const DEATHS: &str = "data/deaths.csv";
pub const COVARIATES: &str = "data/covariates.csv";
pub const RATES: &str = "expected/rates.csv";
pub const EXPECTED_SUMMARY: &str = "expected/summary.csv";
pub const REPLICATES: &str = "sim/replicates.csv";
pub const SMR_SERIES: &str = "sim/smr_series.csv";
pub const COEF_BIAS: &str = "report/coef_bias.csv";
pub const SMR_BIAS: &str = "report/smr_bias.csv";
pub const SMR_MAPE: &str = "report/smr_mape.csv";
pub const FRACTIONS: &str = "report/fractions.csv";

pub fn protected_path(variant: Variant) -> String {
    format!("protected/{}/population.csv", variant.name())
}

pub fn audit_path(variant: Variant) -> String {
    format!("protected/{}/audit.csv", variant.name())
}

pub fn expected_path(source: &str) -> String {
    format!("expected/{source}.csv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Geo,
    Protect,
    Expect,
    Fit,
    Simulate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Geo,
        Stage::Protect,
        Stage::Expect,
        Stage::Fit,
        Stage::Simulate,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Geo => "geo",
            Stage::Protect => "protect",
            Stage::Expect => "expect",
            Stage::Fit => "fit",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    /// Relative path to SHA-256 of the content.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), 1, e.to_string()))
    }
}

/// Files touched by one stage.
#[derive(Default)]
struct Trace {
    inputs: Vec<String>,
    outputs: Vec<String>,
    details: serde_json::Value,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    pub jobs: Option<usize>,
}

impl Pipeline {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>, jobs: Option<usize>) -> Result<Self> {
        config.check()?;
        Ok(Pipeline {
            config,
            out: out.into(),
            jobs,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn input(&self, trace: &mut Trace, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingInput(p));
        }
        trace.inputs.push(rel.to_string());
        Ok(p)
    }

    fn write(&self, trace: &mut Trace, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(rel), bytes)?;
        trace.outputs.push(rel.to_string());
        Ok(())
    }

    /// Run one stage and record it in the manifest.
    pub fn run(&self, stage: Stage) -> Result<()> {
        let start = Instant::now();
        let trace = match stage {
            Stage::Geo => self.geo()?,
            Stage::Protect => self.protect()?,
            Stage::Expect => self.expect()?,
            Stage::Fit => self.fit()?,
            Stage::Simulate => self.simulate()?,
            Stage::Report => self.report()?,
        };
        let seconds = start.elapsed().as_secs_f64();
        self.record(stage, trace, seconds)
    }

    pub fn run_all(&self) -> Result<()> {
        for s in Stage::ALL {
            self.run(s)?;
        }
        Ok(())
    }

    fn record(&self, stage: Stage, trace: Trace, seconds: f64) -> Result<()> {
        let hash = |rels: &[String]| -> Result<BTreeMap<String, String>> {
            rels.iter().map(|r| Ok((r.clone(), sha256_file(&self.path(r))?))).collect()
        };
        let rec = StageRecord {
            stage: stage.name().into(),
            seconds,
            inputs: hash(&trace.inputs)?,
            outputs: hash(&trace.outputs)?,
            details: trace.details,
        };
        let path = self.path(MANIFEST);
        let mut stages = if path.exists() { RunManifest::read(&path)?.stages } else { Vec::new() };
        stages.retain(|s| s.stage != rec.stage);
        stages.push(rec);
        stages.sort_by_key(|s| Stage::ALL.iter().position(|x| x.name() == s.stage).unwrap_or(usize::MAX));
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.config.seed,
            config: serde_json::to_value(&self.config).expect("configuration serialises"),
            stages,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write_atomic(&path, text.as_bytes())
    }

    fn groups(&self) -> GroupSchema {
        GroupSchema::nhw_black()
    }

    fn read_hierarchy(&self, t: &mut Trace) -> Result<Hierarchy> {
        Hierarchy::read(&self.input(t, HIERARCHY)?)
    }

    fn read_cube(&self, t: &mut Trace, rel: &str, col: &str, h: &Hierarchy) -> Result<TabulationCube> {
        let ages = self.config.pop.age_schema()?;
        TabulationCube::ingest(&self.input(t, rel)?, col, &ages, &self.groups(), h, true)
    }

    fn read_graph(&self, t: &mut Trace, units: &[String]) -> Result<Arc<CarGraph>> {
        let adj = Adjacency::read(&self.input(t, ADJACENCY)?)?.reordered(units)?;
        Ok(Arc::new(CarGraph::new(adj)?))
    }

    fn read_expected(&self, t: &mut Trace, source: &str) -> Result<ExpectedCounts> {
        ExpectedCounts::read(&self.input(t, &expected_path(source))?, source)
    }

    /// Geography, synthetic population, baseline deaths and covariates.
    fn geo(&self) -> Result<Trace> {
        let mut t = Trace::default();
        let g = &self.config.geo;
        let seed = self.config.seed;
        let (h, adj) = build_synthetic_geography(g.leaves, &g.branching, g.layout, derive_seed(seed, &["geo"]))?;
        let pop = synthesize_population(&h, &adj, &self.config.pop, derive_seed(seed, &["pop"]))?;
        self.write(&mut t, HIERARCHY, &h.to_csv())?;
        self.write(&mut t, ADJACENCY, &adj.to_csv())?;
        self.write(&mut t, POPULATION, &pop.population.to_csv("count"))?;
        self.write(&mut t, DEATHS, &pop.deaths.to_csv("deaths"))?;
        self.write(&mut t, COVARIATES, &pop.covariates.to_csv())?;
        Ok(t)
    }

    fn protect(&self) -> Result<Trace> {
        let mut t = Trace::default();
        let h = self.read_hierarchy(&mut t)?;
        let truth = self.read_cube(&mut t, POPULATION, "count", &h)?;
        let mut eps = serde_json::Map::new();
        for v in self.config.das_variants() {
            let cfg = self
                .config
                .das
                .resolve(v, h.depth(), derive_seed(self.config.seed, &["das", v.name()]))?;
            let out = run_topdown(&truth, &h, &cfg)?;
            check_consistency(&out.levels, &h, truth.total())?;
            self.write(&mut t, &protected_path(v), &out.leaf().to_csv("count"))?;
            self.write(&mut t, &audit_path(v), &out.audit.to_csv())?;
            eps.insert(v.name().into(), serde_json::json!(out.audit.level_epsilon));
        }
        t.details = serde_json::json!({ "level_epsilon": eps });
        Ok(t)
    }

    fn expect(&self) -> Result<Trace> {
        let mut t = Trace::default();
        let h = self.read_hierarchy(&mut t)?;
        let pop = self.read_cube(&mut t, POPULATION, "count", &h)?;
        let deaths = self.read_cube(&mut t, DEATHS, "deaths", &h)?;
        let rates = reference_rates(&deaths, &pop, self.config.std.rate_mode())?;
        self.write(&mut t, RATES, &rates.to_csv())?;
        let truth = expected_counts(&pop, &rates, TRUTH)?;
        self.write(&mut t, &expected_path(TRUTH), &truth.to_csv())?;
        let mut summary = TableWriter::new(&["source", "group", "metric", "value"]);
        for v in self.config.das_variants() {
            let cube = self.read_cube(&mut t, &protected_path(v), "count", &h)?;
            if cube.total() != pop.total() {
                return Err(Error::Contract(format!(
                    "protected {} total {} differs from the true total {}",
                    v.name(),
                    cube.total(),
                    pop.total()
                )));
            }
            let ec = expected_counts(&cube, &rates, v.name())?;
            self.write(&mut t, &expected_path(v.name()), &ec.to_csv())?;
            let under = underestimation_fraction(&ec, &truth)?;
            let zero = zero_fraction(&ec);
            let below = below_five_fraction(&ec);
            for g in 0..ec.n_groups() {
                for (metric, (group, value)) in [
                    ("under_estimated_pct", &under[g]),
                    ("zero_expected_pct", &zero[g]),
                    ("below5_expected_pct", &below[g]),
                ] {
                    summary.row([v.name(), group.as_str(), metric, fmt_sig(*value, 10).as_str()]);
                }
            }
        }
        self.write(&mut t, EXPECTED_SUMMARY, &summary.into_bytes())?;
        Ok(t)
    }

    /// Fit the model to the observed deaths once per denominator source.
    fn fit(&self) -> Result<Trace> {
        let mut t = Trace::default();
        let h = self.read_hierarchy(&mut t)?;
        let deaths = self.read_cube(&mut t, DEATHS, "deaths", &h)?.marginals(Axes::Age);
        let cov = Covariates::read(&self.input(&mut t, COVARIATES)?)?;
        let mut flags = serde_json::Map::new();
        let mut graph = None;
        for source in &self.config.sim.sources {
            let ec = self.read_expected(&mut t, source)?;
            if deaths.units() != ec.units.as_slice() {
                return Err(Error::InvalidInput(format!("deaths and `{source}` expected counts list different units")));
            }
            let graph = match &graph {
                Some(g) => Arc::clone(g),
                None => {
                    let g = self.read_graph(&mut t, &ec.units)?;
                    graph = Some(Arc::clone(&g));
                    g
                }
            };
            let spec = ModelSpec::build(&ec, &cov, graph, self.config.model.options())?;
            let y: Vec<u64> = spec
                .cells
                .iter()
                .map(|c| deaths.get(c.unit, 0, c.group) as u64)
                .collect();
            let mcmc = self.config.model.mcmc.with_seed(derive_seed(self.config.seed, &["fit", source]));
            let draws = fit(&y, &spec, &mcmc)?;
            let summary = mrr_summary(&draws)?;
            let smr = predict_counts(&draws, &spec)?;
            self.write(&mut t, &format!("fit/{source}/mrr.csv"), &summary.to_csv())?;
            self.write(&mut t, &format!("fit/{source}/smr.csv"), &smr.to_csv())?;
            if self.config.io.write_draws {
                self.write(&mut t, &format!("fit/{source}/draws.csv"), &draws.to_csv())?;
            }
            flags.insert(
                source.clone(),
                serde_json::json!({ "converged": summary.converged, "flagged": summary.flagged, "acceptance": draws.meta.acceptance }),
            );
        }
        t.details = serde_json::Value::Object(flags);
        Ok(t)
    }

    fn simulate(&self) -> Result<Trace> {
        let mut t = Trace::default();
        let sources: Vec<ExpectedCounts> = self
            .config
            .sim
            .sources
            .iter()
            .map(|s| self.read_expected(&mut t, s))
            .collect::<Result<_>>()?;
        let truth = sources
            .iter()
            .find(|s| s.source == TRUTH)
            .expect("checked in config")
            .clone();
        let cov = Covariates::read(&self.input(&mut t, COVARIATES)?)?;
        let graph = self.read_graph(&mut t, &truth.units)?;
        let study = StudyConfig {
            dgp: self.config.sim.dgp(),
            mcmc: self.config.model.mcmc.with_seed(0),
            model: self.config.model.options(),
            seed: derive_seed(self.config.seed, &["sim"]),
        };
        let series = run_study(&study, &truth, &sources, &cov, graph, self.jobs)?;
        self.write(&mut t, REPLICATES, &series.replicates_csv())?;
        self.write(&mut t, SMR_SERIES, &series.smr_series_csv())?;
        let nonconverged: Vec<serde_json::Value> = series
            .replicates
            .iter()
            .flat_map(|r| {
                r.fits
                    .iter()
                    .zip(&series.sources)
                    .filter(|(f, _)| !f.converged)
                    .map(move |(_, s)| serde_json::json!({ "k": r.k, "source": s }))
            })
            .collect();
        let report = StudyReport::from_series(&series, Some((&truth, &sources)))?;
        self.write_report(&mut t, &report)?;
        t.details = serde_json::json!({ "n_reps": series.replicates.len(), "nonconverged": nonconverged });
        Ok(t)
    }

    fn write_report(&self, t: &mut Trace, report: &StudyReport) -> Result<()> {
        self.write(t, COEF_BIAS, &report.coef_bias_csv())?;
        self.write(t, SMR_BIAS, &report.smr_bias_csv())?;
        self.write(t, SMR_MAPE, &report.smr_mape_csv())?;
        self.write(t, FRACTIONS, &report.fractions_csv())
    }

    /// Rebuild the report tables from the stored replicate series.
    fn report(&self) -> Result<Trace> {
        let mut t = Trace::default();
        let series = StudySeries::read(&self.input(&mut t, REPLICATES)?, &self.input(&mut t, SMR_SERIES)?)?;
        let truth = self.read_expected(&mut t, TRUTH)?;
        let sources: Vec<ExpectedCounts> = series
            .sources
            .iter()
            .map(|s| self.read_expected(&mut t, s))
            .collect::<Result<_>>()?;
        let report = StudyReport::from_series(&series, Some((&truth, &sources)))?;
        self.write_report(&mut t, &report)?;
        Ok(t)
    }
}

/// Output directory: `PRIVMAP_OUT`, then the command line, then the config.
pub fn resolve_out(cli: Option<&Path>, config: &RunConfig) -> PathBuf {
    if let Some(env) = std::env::var_os("PRIVMAP_OUT").filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    cli.map(Path::to_path_buf)
        .or_else(|| config.io.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}
