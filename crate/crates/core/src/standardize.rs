//! Indirect age standardization: expected event counts from stratified
//! populations and reference age-specific rates.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Table, TableWriter};
use crate::stats::{fmt_sig, Distribution};
use crate::tabulation::{AgeSchema, GroupSchema, TabulationCube};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// One schedule per age band, pooled over groups.
    #[default]
    Pooled,
    /// A separate schedule per group.
    RaceSpecific,
}

/// Reference rates per age band, optionally per group.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRates {
    ages: AgeSchema,
    /// `Some` for group-specific schedules.
    groups: Option<GroupSchema>,
    /// `rates[a]` when pooled, `rates[a * G + g]` otherwise.
    rates: Vec<f64>,
}

fn ratio(deaths: f64, pop: f64, label: &str) -> Result<f64> {
    if deaths < 0.0 || pop < 0.0 {
        return Err(Error::InvalidInput(format!("negative deaths or population in {label}")));
    }
    if pop == 0.0 {
        if deaths > 0.0 {
            return Err(Error::InvalidInput(format!("{deaths} deaths with zero population in {label}")));
        }
        return Ok(0.0);
    }
    Ok(deaths / pop)
}

impl ReferenceRates {
    /// Pooled rates `deaths[a] / population[a]`.
    pub fn from_totals(ages: AgeSchema, deaths: &[f64], population: &[f64]) -> Result<Self> {
        if deaths.len() != ages.len() || population.len() != ages.len() {
            return Err(Error::InvalidInput("rate inputs do not match the age schema".into()));
        }
        let rates = ages
            .bands()
            .iter()
            .zip(deaths.iter().zip(population))
            .map(|(band, (&d, &p))| ratio(d, p, &format!("age band {band}")))
            .collect::<Result<_>>()?;
        Ok(ReferenceRates {
            ages,
            groups: None,
            rates,
        })
    }

    /// Rates given directly, pooled over groups.
    pub fn pooled(ages: AgeSchema, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != ages.len() || rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidInput("rates must be finite, non-negative and one per band".into()));
        }
        Ok(ReferenceRates {
            ages,
            groups: None,
            rates,
        })
    }

    pub fn ages(&self) -> &AgeSchema {
        &self.ages
    }

    pub fn is_pooled(&self) -> bool {
        self.groups.is_none()
    }

    pub fn rate(&self, age: usize, group: usize) -> f64 {
        match &self.groups {
            None => self.rates[age],
            Some(g) => self.rates[age * g.len() + group],
        }
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["age_band", "group", "rate"]);
        for (a, band) in self.ages.bands().iter().enumerate() {
            match &self.groups {
                None => w.row([band.as_str(), "all", fmt_sig(self.rates[a], 10).as_str()]),
                Some(gs) => {
                    for (g, name) in gs.groups().iter().enumerate() {
                        w.row([band.as_str(), name.as_str(), fmt_sig(self.rate(a, g), 10).as_str()]);
                    }
                }
            }
        }
        w.into_bytes()
    }
}

/// Statewide rates from a stratified deaths cube and the matching population
/// cube, both summed over every unit.
pub fn reference_rates(deaths: &TabulationCube, population: &TabulationCube, mode: RateMode) -> Result<ReferenceRates> {
    if deaths.ages() != population.ages() || deaths.groups() != population.groups() {
        return Err(Error::InvalidInput("deaths and population use different schemas".into()));
    }
    let ages = population.ages().clone();
    let groups = population.groups().clone();
    let g_n = groups.len();
    let sum_stratum = |cube: &TabulationCube, s: usize| -> f64 {
        (0..cube.units().len()).map(|u| cube.unit_cells(u)[s]).sum()
    };
    match mode {
        RateMode::Pooled => {
            let d: Vec<f64> = (0..ages.len()).map(|a| (0..g_n).map(|g| sum_stratum(deaths, a * g_n + g)).sum()).collect();
            let p: Vec<f64> = (0..ages.len())
                .map(|a| (0..g_n).map(|g| sum_stratum(population, a * g_n + g)).sum())
                .collect();
            ReferenceRates::from_totals(ages, &d, &p)
        }
        RateMode::RaceSpecific => {
            let mut rates = Vec::with_capacity(ages.len() * g_n);
            for a in 0..ages.len() {
                for g in 0..g_n {
                    let s = a * g_n + g;
                    let label = format!("age band {} group {}", ages.bands()[a], groups.groups()[g]);
                    rates.push(ratio(sum_stratum(deaths, s), sum_stratum(population, s), &label)?);
                }
            }
            Ok(ReferenceRates {
                ages,
                groups: Some(groups),
                rates,
            })
        }
    }
}

/// Expected counts per unit and group, with a tag naming the population
/// source they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    pub source: String,
    pub units: Vec<String>,
    pub groups: GroupSchema,
    /// `values[u * G + g]`
    pub values: Vec<f64>,
}

impl ExpectedCounts {
    pub fn new(source: impl Into<String>, units: Vec<String>, groups: GroupSchema, values: Vec<f64>) -> Result<Self> {
        if values.len() != units.len() * groups.len() {
            return Err(Error::InvalidInput("expected counts do not match units x groups".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!("expected count {v} is not a finite non-negative number")));
        }
        Ok(ExpectedCounts {
            source: source.into(),
            units,
            groups,
            values,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn get(&self, unit: usize, group: usize) -> f64 {
        self.values[unit * self.groups.len() + group]
    }

    pub fn aligned_with(&self, other: &ExpectedCounts) -> bool {
        self.units == other.units && self.groups == other.groups
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["unit_id", "group", "expected"]);
        for (u, id) in self.units.iter().enumerate() {
            for (g, name) in self.groups.groups().iter().enumerate() {
                w.row([id.as_str(), name.as_str(), fmt_sig(self.get(u, g), 10).as_str()]);
            }
        }
        w.into_bytes()
    }

    /// Read an expected-counts file; units and groups keep first-seen order.
    pub fn read(path: &Path, source: &str) -> Result<Self> {
        let t = Table::read(path, &["unit_id", "group", "expected"])?;
        let mut units: Vec<String> = Vec::new();
        let mut groups: Vec<String> = Vec::new();
        let mut map = HashMap::new();
        for (line, rec) in &t.rows {
            let v = t.f64_at(*line, rec, 2)?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(t.err(*line, format!("expected count {v} is negative or not finite")));
            }
            if !units.iter().any(|u| u == &rec[0]) {
                units.push(rec[0].to_string());
            }
            if !groups.iter().any(|g| g == &rec[1]) {
                groups.push(rec[1].to_string());
            }
            if map.insert((rec[0].to_string(), rec[1].to_string()), v).is_some() {
                return Err(t.err(*line, format!("duplicate cell ({}, {})", &rec[0], &rec[1])));
            }
        }
        let mut values = Vec::with_capacity(units.len() * groups.len());
        for u in &units {
            for g in &groups {
                values.push(
                    *map.get(&(u.clone(), g.clone()))
                        .ok_or_else(|| Error::InvalidInput(format!("{}: no expected count for ({u}, {g})", t.path)))?,
                );
            }
        }
        ExpectedCounts::new(source, units, GroupSchema::new(groups)?, values)
    }
}

/// `P[u, g] = sum_a N[u, a, g] * r[a, g]`.
pub fn expected_counts(cube: &TabulationCube, rates: &ReferenceRates, source: &str) -> Result<ExpectedCounts> {
    if cube.ages() != rates.ages() {
        return Err(Error::InvalidInput("rate bands do not match the cube's age schema".into()));
    }
    if let Some(gs) = &rates.groups {
        if gs != cube.groups() {
            return Err(Error::InvalidInput("rate groups do not match the cube's groups".into()));
        }
    }
    let g_n = cube.groups().len();
    let mut values = vec![0.0; cube.units().len() * g_n];
    for u in 0..cube.units().len() {
        for g in 0..g_n {
            values[u * g_n + g] = (0..cube.ages().len()).map(|a| cube.get(u, a, g) * rates.rate(a, g)).sum();
        }
    }
    ExpectedCounts::new(source, cube.units().to_vec(), cube.groups().clone(), values)
}

fn check_aligned(test: &ExpectedCounts, truth: &ExpectedCounts) -> Result<()> {
    if !test.aligned_with(truth) {
        return Err(Error::InvalidInput(format!(
            "expected counts `{}` and `{}` cover different units or groups",
            test.source, truth.source
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellError {
    pub unit: String,
    pub group: String,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupErrorSummary {
    pub group: String,
    pub distribution: Distribution,
    /// Percent of included cells with test < truth.
    pub under_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PercentErrors {
    pub cells: Vec<CellError>,
    /// Cells with zero true expected count, left out of every summary.
    pub zero_truth: Vec<(String, String)>,
    pub by_group: Vec<GroupErrorSummary>,
}

/// `100 (test - truth) / truth` for every cell with positive truth.
pub fn percent_error(test: &ExpectedCounts, truth: &ExpectedCounts) -> Result<PercentErrors> {
    check_aligned(test, truth)?;
    let g_n = truth.n_groups();
    let mut cells = Vec::new();
    let mut zero_truth = Vec::new();
    let mut per_group: Vec<Vec<f64>> = vec![Vec::new(); g_n];
    for (u, id) in truth.units.iter().enumerate() {
        for (g, name) in truth.groups.groups().iter().enumerate() {
            let t = truth.get(u, g);
            if t == 0.0 {
                zero_truth.push((id.clone(), name.clone()));
                continue;
            }
            let pct = 100.0 * (test.get(u, g) - t) / t;
            per_group[g].push(pct);
            cells.push(CellError {
                unit: id.clone(),
                group: name.clone(),
                percent: pct,
            });
        }
    }
    let under = underestimation_fraction(test, truth)?;
    let by_group = per_group
        .iter()
        .zip(truth.groups.groups())
        .zip(under)
        .map(|((errs, name), (_, under_percent))| GroupErrorSummary {
            group: name.clone(),
            distribution: Distribution::of(errs),
            under_percent,
        })
        .collect();
    Ok(PercentErrors {
        cells,
        zero_truth,
        by_group,
    })
}

/// Percent of cells per group with `test < truth`, among cells whose truth
/// is positive. Groups with no such cells report 0.
pub fn underestimation_fraction(test: &ExpectedCounts, truth: &ExpectedCounts) -> Result<Vec<(String, f64)>> {
    check_aligned(test, truth)?;
    Ok(truth
        .groups
        .groups()
        .iter()
        .enumerate()
        .map(|(g, name)| {
            let (mut n, mut under) = (0usize, 0usize);
            for u in 0..truth.units.len() {
                let t = truth.get(u, g);
                if t > 0.0 {
                    n += 1;
                    if test.get(u, g) < t {
                        under += 1;
                    }
                }
            }
            (name.clone(), percent(under, n))
        })
        .collect())
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

/// Percent of cells per group whose expected count is exactly zero.
pub fn zero_fraction(ec: &ExpectedCounts) -> Vec<(String, f64)> {
    share_below(ec, |v| v == 0.0)
}

/// Percent of cells per group whose expected count is below 5.
pub fn below_five_fraction(ec: &ExpectedCounts) -> Vec<(String, f64)> {
    share_below(ec, |v| v < 5.0)
}

fn share_below(ec: &ExpectedCounts, pred: impl Fn(f64) -> bool) -> Vec<(String, f64)> {
    ec.groups
        .groups()
        .iter()
        .enumerate()
        .map(|(g, name)| {
            let k = (0..ec.units.len()).filter(|&u| pred(ec.get(u, g))).count();
            (name.clone(), percent(k, ec.units.len()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::quantile_sorted;
    use rand::{Rng, SeedableRng};

    fn bands(n: usize) -> AgeSchema {
        let labels = ["0-29", "30-64", "65-99"];
        AgeSchema::new(labels[..n].iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn one_group() -> GroupSchema {
        GroupSchema::new(vec!["all".into()]).unwrap()
    }

    #[test]
    fn direct_ratios() {
        let r = ReferenceRates::from_totals(bands(1), &[10.0], &[1000.0]).unwrap();
        assert_eq!(r.rate(0, 0), 0.01);
        let r = ReferenceRates::from_totals(bands(2), &[10.0, 40.0], &[1000.0, 2000.0]).unwrap();
        assert_eq!((r.rate(0, 0), r.rate(1, 0)), (0.01, 0.02));
        let r = ReferenceRates::from_totals(bands(2), &[0.0, 1.0], &[0.0, 10.0]).unwrap();
        assert_eq!(r.rate(0, 0), 0.0);
        assert!(ReferenceRates::from_totals(bands(1), &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn hand_summation() {
        let cube = TabulationCube::new(1, vec!["a".into()], bands(2), one_group(), vec![100.0, 50.0], true).unwrap();
        let r = ReferenceRates::pooled(bands(2), vec![0.01, 0.02]).unwrap();
        let e = expected_counts(&cube, &r, "truth").unwrap();
        assert_eq!(e.values, vec![2.0]);
        let zero = TabulationCube::zeros(1, vec!["a".into()], bands(2), one_group());
        assert_eq!(expected_counts(&zero, &r, "x").unwrap().values, vec![0.0]);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let cube = TabulationCube::zeros(1, vec!["a".into()], bands(2), one_group());
        let r = ReferenceRates::pooled(bands(3), vec![0.0; 3]).unwrap();
        assert!(expected_counts(&cube, &r, "x").is_err());
    }

    #[test]
    fn linear_in_the_cube() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let units: Vec<String> = (0..20).map(|i| format!("u{i:02}")).collect();
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let cells = (0..20 * 3 * 2).map(|_| rng.random_range(0..500) as f64).collect();
            TabulationCube::new(1, units.clone(), bands(3), GroupSchema::nhw_black(), cells, true).unwrap()
        };
        let (c1, c2) = (mk(&mut rng), mk(&mut rng));
        let sum: Vec<f64> = c1.cells().iter().zip(c2.cells()).map(|(a, b)| a + b).collect();
        let c12 = c1.with_cells(sum, true).unwrap();
        let r = ReferenceRates::pooled(bands(3), vec![0.0013, 0.0071, 0.031]).unwrap();
        let (e1, e2, e12) = (
            expected_counts(&c1, &r, "a").unwrap(),
            expected_counts(&c2, &r, "b").unwrap(),
            expected_counts(&c12, &r, "c").unwrap(),
        );
        for i in 0..e12.values.len() {
            assert!((e12.values[i] - e1.values[i] - e2.values[i]).abs() < 1e-12);
        }
        let doubled = c1.with_cells(c1.cells().iter().map(|v| 2.0 * v).collect(), true).unwrap();
        let ed = expected_counts(&doubled, &r, "d").unwrap();
        for i in 0..ed.values.len() {
            assert!((ed.values[i] - 2.0 * e1.values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn race_specific_rates() {
        let ages = bands(1);
        let pop = TabulationCube::new(1, vec!["a".into()], ages.clone(), GroupSchema::nhw_black(), vec![1000.0, 100.0], true)
            .unwrap();
        let deaths = pop.with_cells(vec![10.0, 3.0], true).unwrap();
        let pooled = reference_rates(&deaths, &pop, RateMode::Pooled).unwrap();
        assert!((pooled.rate(0, 1) - 13.0 / 1100.0).abs() < 1e-15);
        let rs = reference_rates(&deaths, &pop, RateMode::RaceSpecific).unwrap();
        assert_eq!((rs.rate(0, 0), rs.rate(0, 1)), (0.01, 0.03));
    }

    fn ec(values: Vec<f64>) -> ExpectedCounts {
        let units = (0..values.len()).map(|i| format!("u{i}")).collect();
        ExpectedCounts::new("x", units, one_group(), values).unwrap()
    }

    #[test]
    fn percent_errors() {
        let truth = ec(vec![10.0, 4.0, 0.0]);
        let same = percent_error(&truth, &truth).unwrap();
        assert!(same.cells.iter().all(|c| c.percent == 0.0));
        let pe = percent_error(&ec(vec![9.0, 5.0, 1.0]), &truth).unwrap();
        assert_eq!(pe.cells[0].percent, -10.0);
        assert_eq!(pe.zero_truth, vec![("u2".to_string(), "all".to_string())]);
        assert_eq!(pe.by_group[0].under_percent, 50.0);
        assert_eq!(underestimation_fraction(&truth, &truth).unwrap()[0].1, 0.0);
    }

    #[test]
    fn summary_quartiles_match_sorting() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<f64> = (0..1000).map(|_| rng.random_range(1.0..50.0)).collect();
        let test: Vec<f64> = truth.iter().map(|t| t * rng.random_range(0.5..1.5)).collect();
        let pe = percent_error(&ec(test.clone()), &ec(truth.clone())).unwrap();
        let mut direct: Vec<f64> = test.iter().zip(&truth).map(|(a, t)| 100.0 * (a - t) / t).collect();
        direct.sort_by(|a, b| a.total_cmp(b));
        let d = &pe.by_group[0].distribution;
        assert_eq!(d.q25, quantile_sorted(&direct, 0.25));
        assert_eq!(d.median, quantile_sorted(&direct, 0.5));
        assert_eq!(d.q75, quantile_sorted(&direct, 0.75));
        assert_eq!(d.min, direct[0]);
    }

    #[test]
    fn symmetric_noise_on_large_counts() {
        use crate::das::{sample_noise, NoiseModel};
        let mut r = crate::rng::stream(4, &["std-test"]);
        let ages = AgeSchema::premature_default();
        let rates = ReferenceRates::pooled(ages.clone(), vec![2e-4, 1e-4, 4e-4, 6e-4, 1.1e-3, 2.6e-3, 5.8e-3]).unwrap();
        let n = 10_000;
        let units: Vec<String> = (0..n).map(|i| format!("u{i:05}")).collect();
        let truth: Vec<f64> = (0..n * 7).map(|i| 500.0 + (i % 300) as f64).collect();
        let noise = sample_noise(&NoiseModel::default(), 0.5, truth.len(), &mut r).unwrap();
        let noisy: Vec<f64> = truth.iter().zip(&noise).map(|(t, &z)| t + z as f64).collect();
        let cube = TabulationCube::new(1, units, ages, one_group(), truth, true).unwrap();
        let e_truth = expected_counts(&cube, &rates, "truth").unwrap();
        let e_test = expected_counts(&cube.with_cells(noisy, true).unwrap(), &rates, "test").unwrap();
        let f = underestimation_fraction(&e_test, &e_truth).unwrap()[0].1;
        assert!((45.0..=55.0).contains(&f), "{f}");
    }

    #[test]
    fn zero_and_small_shares() {
        let e = ec(vec![0.0, 3.0, 6.0, 0.0]);
        assert_eq!(zero_fraction(&e)[0].1, 50.0);
        assert_eq!(below_five_fraction(&e)[0].1, 75.0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = ExpectedCounts::new(
            "truth",
            vec!["a".into(), "b".into()],
            GroupSchema::nhw_black(),
            vec![1.5, 0.0, 2.25, 1e-7],
        )
        .unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, e.to_csv()).unwrap();
        assert_eq!(ExpectedCounts::read(&p, "truth").unwrap(), e);
    }
}
