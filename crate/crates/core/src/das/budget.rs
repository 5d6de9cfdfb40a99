use serde::{Deserialize, Serialize};

use super::noise::NoiseModel;
use crate::error::{Error, Result};

/// Population-table budget shared by the 2019 and 2020 demonstration
/// products.
pub const EPSILON_POPULATION_V19_V20: f64 = 4.0;
/// Person-level budget of the 2022 demonstration product.
pub const EPSILON_PERSONS_V22: f64 = 20.82;

const SHARE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V19,
    V20,
    V22,
    Custom,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::V19 => "v19",
            Variant::V20 => "v20",
            Variant::V22 => "v22",
            Variant::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "v19" => Some(Variant::V19),
            "v20" => Some(Variant::V20),
            "v22" => Some(Variant::V22),
            "custom" => Some(Variant::Custom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassMode {
    /// Whole age x group histogram reconciled in one pass per level.
    Single,
    /// Unit totals first, then detail constrained to those totals.
    Multi,
}

impl PassMode {
    pub fn n_passes(&self) -> usize {
        match self {
            PassMode::Single => 1,
            PassMode::Multi => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon_total: f64,
    pub level_shares: Vec<f64>,
    pub pass_shares: Vec<f64>,
}

impl PrivacyBudget {
    pub fn new(epsilon_total: f64, level_shares: Vec<f64>, pass_shares: Vec<f64>) -> Result<Self> {
        let b = PrivacyBudget {
            epsilon_total,
            level_shares,
            pass_shares,
        };
        b.check()?;
        Ok(b)
    }

    /// Equal shares over `depth` levels and `passes` passes.
    pub fn equal(epsilon_total: f64, depth: usize, passes: usize) -> Self {
        PrivacyBudget {
            epsilon_total,
            level_shares: vec![1.0 / depth as f64; depth],
            pass_shares: vec![1.0 / passes as f64; passes],
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.epsilon_total > 0.0) {
            return Err(Error::Config(format!("epsilon_total must be positive, got {}", self.epsilon_total)));
        }
        for (what, shares) in [("level_shares", &self.level_shares), ("pass_shares", &self.pass_shares)] {
            if shares.is_empty() {
                return Err(Error::Config(format!("{what} is empty")));
            }
            if shares.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
                return Err(Error::Config(format!("{what} must lie in (0, 1]: {shares:?}")));
            }
            let sum: f64 = shares.iter().sum();
            if (sum - 1.0).abs() > SHARE_TOL {
                return Err(Error::Config(format!("{what} sum to {sum}, not 1")));
            }
        }
        Ok(())
    }

    pub fn is_unlimited(&self) -> bool {
        self.epsilon_total.is_infinite()
    }

    pub fn level_epsilon(&self, rank: usize) -> f64 {
        self.epsilon_total * self.level_shares[rank]
    }

    /// Budget for one counting query at `rank` in `pass`.
    pub fn query_epsilon(&self, rank: usize, pass: usize) -> f64 {
        self.level_epsilon(rank) * self.pass_shares[pass]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DasConfig {
    pub variant: Variant,
    pub budget: PrivacyBudget,
    pub noise: NoiseModel,
    pub passes: PassMode,
    pub seed: u64,
}

impl DasConfig {
    /// Preset for one of the demonstration-product variants over a hierarchy
    /// of `depth` levels, with equal level shares and, for multi-pass
    /// variants, an even totals/detail split.
    pub fn preset(variant: Variant, depth: usize, noise: NoiseModel, seed: u64) -> Result<Self> {
        let (eps, passes) = match variant {
            Variant::V19 => (EPSILON_POPULATION_V19_V20, PassMode::Single),
            Variant::V20 => (EPSILON_POPULATION_V19_V20, PassMode::Multi),
            Variant::V22 => (EPSILON_PERSONS_V22, PassMode::Multi),
            Variant::Custom => {
                return Err(Error::Config("the custom variant has no preset; give a budget".into()));
            }
        };
        Ok(DasConfig {
            variant,
            budget: PrivacyBudget::equal(eps, depth, passes.n_passes()),
            noise,
            passes,
            seed,
        })
    }

    pub fn custom(budget: PrivacyBudget, noise: NoiseModel, passes: PassMode, seed: u64) -> Result<Self> {
        let c = DasConfig {
            variant: Variant::Custom,
            budget,
            noise,
            passes,
            seed,
        };
        c.check(c.budget.level_shares.len())?;
        Ok(c)
    }

    pub fn check(&self, depth: usize) -> Result<()> {
        self.budget.check()?;
        if self.budget.level_shares.len() != depth {
            return Err(Error::Config(format!(
                "{} level shares for a hierarchy of depth {depth}",
                self.budget.level_shares.len()
            )));
        }
        if self.budget.pass_shares.len() != self.passes.n_passes() {
            return Err(Error::Config(format!(
                "{} pass shares for {} passes",
                self.budget.pass_shares.len(),
                self.passes.n_passes()
            )));
        }
        Ok(())
    }
}
