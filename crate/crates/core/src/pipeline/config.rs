//! Run configuration: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::car::{CovariateScale, McmcConfig, ModelOptions, Priors, ZeroOffset};
use crate::das::{DasConfig, NoiseFamily, NoiseModel, PassMode, PrivacyBudget, Variant};
use crate::error::{Error, Result};
use crate::geo::Layout;
use crate::sim::{DgpConfig, PopulationConfig};
use crate::standardize::RateMode;

/// Name of the denominator source holding the unprotected counts.
pub const TRUTH: &str = "truth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoSection {
    pub leaves: usize,
    /// Fan-out per level below the root; the product must equal `leaves`.
    pub branching: Vec<usize>,
    pub layout: Layout,
}

impl Default for GeoSection {
    fn default() -> Self {
        GeoSection {
            leaves: 300,
            branching: vec![2, 3, 5, 2, 5],
            layout: Layout::Grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DasSection {
    pub variant: Variant,
    /// Only for the custom variant; presets pin their own budgets.
    pub epsilon_total: Option<f64>,
    pub level_shares: Option<Vec<f64>>,
    pub pass_shares: Option<Vec<f64>>,
    pub passes: Option<PassMode>,
    pub noise_family: NoiseFamily,
}

impl Default for DasSection {
    fn default() -> Self {
        DasSection {
            variant: Variant::V19,
            epsilon_total: None,
            level_shares: None,
            pass_shares: None,
            passes: None,
            noise_family: NoiseFamily::DiscreteLaplace,
        }
    }
}

impl DasSection {
    /// Mechanism settings for `variant` over a hierarchy of `depth` levels.
    pub fn resolve(&self, variant: Variant, depth: usize, seed: u64) -> Result<DasConfig> {
        let noise = NoiseModel::new(self.noise_family);
        if variant != Variant::Custom {
            return DasConfig::preset(variant, depth, noise, seed);
        }
        let eps = self
            .epsilon_total
            .ok_or_else(|| Error::Config("das.epsilon_total is required for the custom variant".into()))?;
        let passes = self.passes.unwrap_or(PassMode::Single);
        let level_shares = self.level_shares.clone().unwrap_or_else(|| vec![1.0 / depth as f64; depth]);
        let n_pass = passes.n_passes();
        let pass_shares = self.pass_shares.clone().unwrap_or_else(|| vec![1.0 / n_pass as f64; n_pass]);
        if pass_shares.len() != n_pass {
            return Err(Error::Config(format!("{} pass shares for {n_pass} passes", pass_shares.len())));
        }
        DasConfig::custom(PrivacyBudget::new(eps, level_shares, pass_shares)?, noise, passes, seed)
    }

    fn check(&self) -> Result<()> {
        let custom_only = self.epsilon_total.is_some()
            || self.level_shares.is_some()
            || self.pass_shares.is_some()
            || self.passes.is_some();
        if self.variant != Variant::Custom && custom_only {
            return Err(Error::Config(format!(
                "the {} preset fixes its budget; set das.variant = \"custom\" to give one",
                self.variant.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StdSection {
    pub race_specific_rates: bool,
}

impl Default for StdSection {
    fn default() -> Self {
        StdSection {
            race_specific_rates: false,
        }
    }
}

impl StdSection {
    pub fn rate_mode(&self) -> RateMode {
        if self.race_specific_rates {
            RateMode::RaceSpecific
        } else {
            RateMode::Pooled
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
}

impl Default for McmcSection {
    fn default() -> Self {
        let d = McmcConfig::default();
        McmcSection {
            iterations: d.iterations,
            burnin: d.burnin,
            thin: d.thin,
        }
    }
}

impl McmcSection {
    pub fn with_seed(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            iterations: self.iterations,
            burnin: self.burnin,
            thin: self.thin,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub covariates: Vec<String>,
    pub covariate_scale: CovariateScale,
    pub zero_offset: ZeroOffset,
    pub spatial: bool,
    pub unstructured: bool,
    pub priors: Priors,
    pub mcmc: McmcSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        let o = ModelOptions::default();
        ModelSection {
            covariates: o.covariates,
            covariate_scale: o.covariate_scale,
            zero_offset: o.zero_offset,
            spatial: o.spatial,
            unstructured: o.unstructured,
            priors: o.priors,
            mcmc: McmcSection::default(),
        }
    }
}

impl ModelSection {
    pub fn options(&self) -> ModelOptions {
        ModelOptions {
            covariates: self.covariates.clone(),
            covariate_scale: self.covariate_scale,
            zero_offset: self.zero_offset,
            spatial: self.spatial,
            unstructured: self.unstructured,
            priors: self.priors.clone(),
            ..ModelOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub n_reps: usize,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub car_scale: f64,
    pub phi_var: f64,
    /// Denominator sources compared; `truth` plus DAS variant names.
    pub sources: Vec<String>,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = DgpConfig::default();
        SimSection {
            n_reps: d.n_reps,
            beta: d.beta,
            rho: d.rho,
            car_scale: d.car_scale,
            phi_var: d.phi_var,
            sources: vec![TRUTH.into(), "v19".into(), "v20".into(), "v22".into()],
        }
    }
}

impl SimSection {
    pub fn dgp(&self) -> DgpConfig {
        DgpConfig {
            beta: self.beta.clone(),
            rho: self.rho,
            car_scale: self.car_scale,
            phi_var: self.phi_var,
            n_reps: self.n_reps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Output directory; `--out` and `PRIVMAP_OUT` take precedence.
    pub out: Option<String>,
    /// Also write every stored posterior draw from the fit stage.
    pub write_draws: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub geo: GeoSection,
    pub pop: PopulationConfig,
    pub das: DasSection,
    pub std: StdSection,
    pub model: ModelSection,
    pub sim: SimSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2022,
            geo: GeoSection::default(),
            pop: PopulationConfig::default(),
            das: DasSection::default(),
            std: StdSection::default(),
            model: ModelSection::default(),
            sim: SimSection::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn check(&self) -> Result<()> {
        if self.geo.branching.iter().product::<usize>() != self.geo.leaves {
            return Err(Error::Config(format!(
                "geo.branching {:?} does not multiply to {} leaves",
                self.geo.branching, self.geo.leaves
            )));
        }
        self.pop.check()?;
        self.das.check()?;
        self.sim.dgp().check()?;
        self.model.options().check()?;
        self.model.mcmc.with_seed(0).check()?;
        if !self.sim.sources.iter().any(|s| s == TRUTH) {
            return Err(Error::Config(format!("sim.sources must include `{TRUTH}`")));
        }
        for (i, s) in self.sim.sources.iter().enumerate() {
            if self.sim.sources[..i].contains(s) {
                return Err(Error::Config(format!("source `{s}` listed twice")));
            }
            if s != TRUTH {
                let v = Variant::parse(s).ok_or_else(|| Error::Config(format!("unknown source `{s}`")))?;
                if v == Variant::Custom && self.das.variant != Variant::Custom {
                    return Err(Error::Config("the custom source needs das.variant = \"custom\"".into()));
                }
            }
        }
        Ok(())
    }

    /// DAS variants to protect: the configured one and every source.
    pub fn das_variants(&self) -> Vec<Variant> {
        let mut out = vec![self.das.variant];
        for s in &self.sim.sources {
            if let Some(v) = Variant::parse(s) {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out
    }
}
