//! Synthetic stratified populations, area covariates and baseline deaths
//! over a generated geography.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::car::sample_car_prior;
use crate::error::{Error, Result};
use crate::geo::{Adjacency, Hierarchy};
use crate::rng;
use crate::stats::{mean, sd};
use crate::tabulation::{AgeSchema, Covariates, GroupSchema, TabulationCube};

pub const POVERTY: &str = "prop_pov";

/// Census age bands below 65 as published in the sex-by-age tables.
const CENSUS_BANDS: [(u32, u32); 17] = [
    (0, 4),
    (5, 9),
    (10, 14),
    (15, 17),
    (18, 19),
    (20, 20),
    (21, 21),
    (22, 24),
    (25, 29),
    (30, 34),
    (35, 39),
    (40, 44),
    (45, 49),
    (50, 54),
    (55, 59),
    (60, 61),
    (62, 64),
];

/// Relative size of each five-year age group from 0-4 to 60-64.
const MAJORITY_FIVE_YEAR: [f64; 13] = [5.5, 6.0, 6.5, 6.5, 6.5, 6.0, 6.0, 6.5, 7.5, 8.0, 8.0, 7.5, 6.5];
const MINORITY_FIVE_YEAR: [f64; 13] = [8.0, 8.0, 8.5, 9.0, 9.0, 8.0, 7.5, 7.0, 7.0, 6.5, 6.0, 5.0, 4.0];

fn band_label((lo, hi): (u32, u32)) -> String {
    if lo == hi {
        lo.to_string()
    } else {
        format!("{lo}-{hi}")
    }
}

/// Spread five-year weights over the census bands by years covered.
fn band_weights(five_year: &[f64; 13]) -> Vec<f64> {
    CENSUS_BANDS
        .iter()
        .map(|&(lo, hi)| (lo..=hi).map(|y| five_year[(y / 5) as usize] / 5.0).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub age_bands: Vec<String>,
    /// Relative age structure of the majority and minority groups.
    pub majority_age_weights: Vec<f64>,
    pub minority_age_weights: Vec<f64>,
    /// Mean majority population per leaf unit.
    pub majority_mean: f64,
    /// Log-scale spread of majority populations.
    pub majority_sigma: f64,
    /// Total minority population over total majority population.
    pub minority_ratio: f64,
    /// Log-scale spread of the minority share across units; the share is
    /// spatially clustered.
    pub minority_sigma: f64,
    /// Fraction of units with no minority residents, taken from the low end
    /// of the clustered share.
    pub minority_absent: f64,
    /// Baseline event rate per person for each age band.
    pub base_rates: Vec<f64>,
    /// Baseline rate multiplier for the minority group.
    pub minority_rate_ratio: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        let mids: Vec<f64> = CENSUS_BANDS.iter().map(|&(lo, hi)| (lo + hi + 1) as f64 / 2.0).collect();
        PopulationConfig {
            age_bands: CENSUS_BANDS.iter().map(|&b| band_label(b)).collect(),
            majority_age_weights: band_weights(&MAJORITY_FIVE_YEAR),
            minority_age_weights: band_weights(&MINORITY_FIVE_YEAR),
            majority_mean: 3400.0,
            majority_sigma: 0.35,
            minority_ratio: 1.0 / 12.0,
            minority_sigma: 1.0,
            minority_absent: 0.5,
            base_rates: mids.iter().map(|a| 0.001 * (0.08 * a).exp()).collect(),
            minority_rate_ratio: 1.5,
        }
    }
}

impl PopulationConfig {
    pub fn check(&self) -> Result<()> {
        let a = self.age_bands.len();
        if self.majority_age_weights.len() != a || self.minority_age_weights.len() != a || self.base_rates.len() != a {
            return Err(Error::Config("age weights and base rates need one entry per age band".into()));
        }
        for w in [&self.majority_age_weights, &self.minority_age_weights] {
            if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("age weights must be non-negative with a positive sum".into()));
            }
        }
        if self.base_rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("base rates must be finite and non-negative".into()));
        }
        for (name, v) in [
            ("majority_mean", self.majority_mean),
            ("minority_ratio", self.minority_ratio),
            ("minority_rate_ratio", self.minority_rate_ratio),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.minority_absent) {
            return Err(Error::Config(format!("minority_absent must lie in [0, 1), got {}", self.minority_absent)));
        }
        for (name, v) in [("majority_sigma", self.majority_sigma), ("minority_sigma", self.minority_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn age_schema(&self) -> Result<AgeSchema> {
        AgeSchema::new(self.age_bands.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPopulation {
    pub population: TabulationCube,
    pub deaths: TabulationCube,
    pub covariates: Covariates,
}

/// Split `total` over categories in proportion to `weights` by sequential
/// binomial draws.
fn multinomial<R: Rng + ?Sized>(total: u64, weights: &[f64], rng: &mut R) -> Vec<u64> {
    let mut left = total;
    let mut mass: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        if i + 1 == weights.len() {
            out.push(left);
            break;
        }
        let p = if mass > 0.0 { (w / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = if left == 0 { 0 } else { Binomial::new(left, p).expect("valid binomial").sample(rng) };
        out.push(k);
        left -= k;
        mass -= w;
    }
    out
}

/// Standardised smooth field over the leaves, used to cluster the minority
/// share and poverty spatially.
fn smooth_field(adj: &Adjacency, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, &["synth", "field"]);
    let z = sample_car_prior(adj, 0.95, 1.0, &mut r)?;
    let (m, s) = (mean(&z), sd(&z));
    Ok(z.iter().map(|v| (v - m) / s.max(1e-12)).collect())
}

/// Build a leaf-level population cube, a poverty covariate and a baseline
/// deaths cube. `adj` must cover the hierarchy's leaves.
pub fn synthesize_population(h: &Hierarchy, adj: &Adjacency, cfg: &PopulationConfig, seed: u64) -> Result<SyntheticPopulation> {
    cfg.check()?;
    let ids = h.leaf_ids();
    let adj = adj.reordered(&ids)?;
    let n = ids.len();
    let ages = cfg.age_schema()?;
    let groups = GroupSchema::nhw_black();
    let field = smooth_field(&adj, seed)?;

    let mut r = rng::stream(seed, &["synth", "population"]);
    let maj_totals: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = r.sample(StandardNormal);
            cfg.majority_mean * (cfg.majority_sigma * z - cfg.majority_sigma * cfg.majority_sigma / 2.0).exp()
        })
        .collect();
    let share: Vec<f64> = field
        .iter()
        .map(|f| {
            let e: f64 = r.sample(StandardNormal);
            (cfg.minority_sigma * (0.8 * f + 0.6 * e)).exp()
        })
        .collect();
    let cutoff = if cfg.minority_absent > 0.0 {
        crate::stats::quantile(&share, cfg.minority_absent)
    } else {
        f64::NEG_INFINITY
    };
    let raw_minority: Vec<f64> = maj_totals
        .iter()
        .zip(&share)
        .map(|(m, s)| if *s <= cutoff { 0.0 } else { m * s })
        .collect();
    let norm = cfg.minority_ratio * maj_totals.iter().sum::<f64>() / raw_minority.iter().sum::<f64>();

    let a_n = ages.len();
    let mut cells = vec![0.0; n * a_n * 2];
    for u in 0..n {
        let totals = [maj_totals[u].round() as u64, (raw_minority[u] * norm).round() as u64];
        for (g, (&total, weights)) in totals.iter().zip([&cfg.majority_age_weights, &cfg.minority_age_weights]).enumerate() {
            for (a, k) in multinomial(total, weights, &mut r).into_iter().enumerate() {
                cells[(u * a_n + a) * 2 + g] = k as f64;
            }
        }
    }
    let population = TabulationCube::new(h.leaf_rank(), ids.clone(), ages, groups, cells, true)?;

    let mut rd = rng::stream(seed, &["synth", "deaths"]);
    let deaths_cells: Vec<f64> = population
        .cells()
        .iter()
        .enumerate()
        .map(|(i, &pop)| {
            let a = (i / 2) % a_n;
            let g = i % 2;
            let lam = pop * cfg.base_rates[a] * if g == 1 { cfg.minority_rate_ratio } else { 1.0 };
            if lam > 0.0 {
                Poisson::new(lam).expect("positive mean").sample(&mut rd)
            } else {
                0.0
            }
        })
        .collect();
    let deaths = population.with_cells(deaths_cells, true)?;

    let mut rp = rng::stream(seed, &["synth", "poverty"]);
    let pov: Vec<f64> = field
        .iter()
        .map(|f| {
            let e: f64 = rp.sample(StandardNormal);
            1.0 / (1.0 + (-(-1.7 + 0.5 * f + 0.5 * e)).exp())
        })
        .collect();
    let covariates = Covariates {
        units: ids,
        names: vec![POVERTY.into()],
        values: pov.into_iter().map(|p| vec![p]).collect(),
    };
    Ok(SyntheticPopulation {
        population,
        deaths,
        covariates,
    })
}
