//! Stratified population tables over a geographic level.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Hierarchy;
use crate::io::{Table, TableWriter};
use crate::stats::fmt_sig;

/// Ordered, non-overlapping age bands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeSchema {
    bands: Vec<String>,
}

impl AgeSchema {
    pub fn new(bands: Vec<String>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::InvalidInput("age schema needs at least one band".into()));
        }
        check_unique(&bands, "age band")?;
        check_band_order(&bands)?;
        Ok(AgeSchema { bands })
    }

    /// Seven bands covering ages 0 to 64.
    pub fn premature_default() -> Self {
        let bands = ["0-4", "5-14", "15-24", "25-34", "35-44", "45-54", "55-64"];
        AgeSchema {
            bands: bands.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn bands(&self) -> &[String] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn index_of(&self, band: &str) -> Option<usize> {
        self.bands.iter().position(|b| b == band)
    }
}

/// Bands written as `lo-hi` must be increasing and disjoint. Other labels are
/// taken in the order given.
fn check_band_order(bands: &[String]) -> Result<()> {
    let parsed: Option<Vec<(u32, u32)>> = bands
        .iter()
        .map(|b| {
            let (lo, hi) = b.split_once('-')?;
            Some((lo.trim().parse().ok()?, hi.trim().parse().ok()?))
        })
        .collect();
    if let Some(ranges) = parsed {
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            if lo > hi || (i > 0 && lo <= ranges[i - 1].1) {
                return Err(Error::InvalidInput(format!("age band `{}` overlaps or is out of order", bands[i])));
            }
        }
    }
    Ok(())
}

fn check_unique(labels: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(Error::InvalidInput(format!("duplicate {what} `{l}`")));
        }
    }
    Ok(())
}

/// Ordered racialized-group labels; index 0 is the reference group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSchema {
    groups: Vec<String>,
}

impl GroupSchema {
    pub fn new(groups: Vec<String>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidInput("group schema needs at least one group".into()));
        }
        check_unique(&groups, "group")?;
        Ok(GroupSchema { groups })
    }

    pub fn nhw_black() -> Self {
        GroupSchema {
            groups: vec!["NHW".into(), "Black".into()],
        }
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn index_of(&self, g: &str) -> Option<usize> {
        self.groups.iter().position(|x| x == g)
    }
}

/// Counts per unit and (age band, group) stratum, stored densely.
/// A stratum index is `age * n_groups + group`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulationCube {
    level: usize,
    units: Vec<String>,
    ages: AgeSchema,
    groups: GroupSchema,
    cells: Vec<f64>,
    integer_valued: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axes {
    None,
    Age,
    Group,
    Both,
}

impl TabulationCube {
    pub fn new(
        level: usize,
        units: Vec<String>,
        ages: AgeSchema,
        groups: GroupSchema,
        cells: Vec<f64>,
        integer_valued: bool,
    ) -> Result<Self> {
        let expect = units.len() * ages.len() * groups.len();
        if cells.len() != expect {
            return Err(Error::InvalidInput(format!("cube has {} cells, expected {expect}", cells.len())));
        }
        if integer_valued {
            if let Some(pos) = cells.iter().position(|&c| c < 0.0 || c.fract() != 0.0 || !c.is_finite()) {
                let s = ages.len() * groups.len();
                return Err(Error::InvalidInput(format!(
                    "integer cube has invalid cell {} for unit `{}`",
                    cells[pos],
                    units[pos / s]
                )));
            }
        }
        Ok(TabulationCube {
            level,
            units,
            ages,
            groups,
            cells,
            integer_valued,
        })
    }

    pub fn zeros(level: usize, units: Vec<String>, ages: AgeSchema, groups: GroupSchema) -> Self {
        let n = units.len() * ages.len() * groups.len();
        TabulationCube {
            level,
            units,
            ages,
            groups,
            cells: vec![0.0; n],
            integer_valued: true,
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn ages(&self) -> &AgeSchema {
        &self.ages
    }

    pub fn groups(&self) -> &GroupSchema {
        &self.groups
    }

    pub fn is_integer_valued(&self) -> bool {
        self.integer_valued
    }

    pub fn n_strata(&self) -> usize {
        self.ages.len() * self.groups.len()
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn unit_cells(&self, u: usize) -> &[f64] {
        let s = self.n_strata();
        &self.cells[u * s..(u + 1) * s]
    }

    pub fn unit_cells_mut(&mut self, u: usize) -> &mut [f64] {
        let s = self.n_strata();
        &mut self.cells[u * s..(u + 1) * s]
    }

    pub fn get(&self, unit: usize, age: usize, group: usize) -> f64 {
        self.cells[(unit * self.ages.len() + age) * self.groups.len() + group]
    }

    pub fn set(&mut self, unit: usize, age: usize, group: usize, v: f64) {
        let g = self.groups.len();
        self.cells[(unit * self.ages.len() + age) * g + group] = v;
    }

    pub fn stratum(&self, age: usize, group: usize) -> usize {
        age * self.groups.len() + group
    }

    /// (age, group) of a stratum index.
    pub fn stratum_parts(&self, s: usize) -> (usize, usize) {
        (s / self.groups.len(), s % self.groups.len())
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.iter().position(|u| u == id)
    }

    pub fn unit_total(&self, u: usize) -> f64 {
        self.unit_cells(u).iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().sum()
    }

    /// Same shape with new values; integrality is re-checked when requested.
    pub fn with_cells(&self, cells: Vec<f64>, integer_valued: bool) -> Result<Self> {
        TabulationCube::new(
            self.level,
            self.units.clone(),
            self.ages.clone(),
            self.groups.clone(),
            cells,
            integer_valued,
        )
    }

    pub fn same_shape(&self, other: &TabulationCube) -> bool {
        self.units == other.units && self.ages == other.ages && self.groups == other.groups
    }

    /// Sum leaf (or any deeper-level) cells up to the units at `target`.
    pub fn aggregate(&self, h: &Hierarchy, target: usize) -> Result<TabulationCube> {
        if target >= h.depth() {
            return Err(Error::InvalidInput(format!(
                "level {target} is not in a hierarchy of depth {}",
                h.depth()
            )));
        }
        if target > self.level {
            return Err(Error::InvalidInput(format!(
                "cannot aggregate a level-{} cube down to level {target}",
                self.level
            )));
        }
        let parents = h.ids_at_level(target);
        let pos: HashMap<&str, usize> = parents.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let s = self.n_strata();
        let mut cells = vec![0.0; parents.len() * s];
        for (u, id) in self.units.iter().enumerate() {
            let idx = h
                .index_of(id)
                .ok_or_else(|| Error::InvalidInput(format!("unit `{id}` not in hierarchy")))?;
            let anc = h
                .ancestor_at(idx, target)
                .ok_or_else(|| Error::InvalidInput(format!("unit `{id}` has no ancestor at level {target}")))?;
            let p = pos[h.unit(anc).id.as_str()];
            for (acc, v) in cells[p * s..(p + 1) * s].iter_mut().zip(self.unit_cells(u)) {
                *acc += v;
            }
        }
        TabulationCube::new(
            target,
            parents,
            self.ages.clone(),
            self.groups.clone(),
            cells,
            self.integer_valued,
        )
    }

    /// One cube per level of the hierarchy, root first. The cube must be at
    /// the leaf level.
    pub fn leveled(&self, h: &Hierarchy) -> Result<Vec<TabulationCube>> {
        if self.level != h.leaf_rank() {
            return Err(Error::InvalidInput("leveled cubes need a leaf-level cube".into()));
        }
        let mut out: Vec<TabulationCube> = (0..h.leaf_rank()).map(|r| self.aggregate(h, r)).collect::<Result<_>>()?;
        out.push(self.clone());
        Ok(out)
    }

    /// Sum over the named axes. Summed axes collapse to a single `all` label.
    pub fn marginals(&self, over: Axes) -> TabulationCube {
        let (sum_age, sum_group) = match over {
            Axes::None => return self.clone(),
            Axes::Age => (true, false),
            Axes::Group => (false, true),
            Axes::Both => (true, true),
        };
        let ages = if sum_age {
            AgeSchema { bands: vec!["all".into()] }
        } else {
            self.ages.clone()
        };
        let groups = if sum_group {
            GroupSchema { groups: vec!["all".into()] }
        } else {
            self.groups.clone()
        };
        let mut out = TabulationCube::zeros(self.level, self.units.clone(), ages, groups);
        out.integer_valued = self.integer_valued;
        for u in 0..self.units.len() {
            for a in 0..self.ages.len() {
                for g in 0..self.groups.len() {
                    let (ta, tg) = (if sum_age { 0 } else { a }, if sum_group { 0 } else { g });
                    let v = out.get(u, ta, tg) + self.get(u, a, g);
                    out.set(u, ta, tg, v);
                }
            }
        }
        out
    }

    /// Read a file with header `unit_id,age_band,group,<value_col>`. Every
    /// unit named must be in the hierarchy and share one level; every stratum
    /// of every unit named must be present exactly once.
    pub fn ingest(
        path: &Path,
        value_col: &str,
        ages: &AgeSchema,
        groups: &GroupSchema,
        h: &Hierarchy,
        integer_valued: bool,
    ) -> Result<TabulationCube> {
        let t = Table::read(path, &["unit_id", "age_band", "group", value_col])?;
        Self::from_table(&t, ages, groups, h, integer_valued)
    }

    pub fn parse(
        name: &str,
        bytes: &[u8],
        value_col: &str,
        ages: &AgeSchema,
        groups: &GroupSchema,
        h: &Hierarchy,
        integer_valued: bool,
    ) -> Result<TabulationCube> {
        let t = Table::parse(name, bytes, &["unit_id", "age_band", "group", value_col])?;
        Self::from_table(&t, ages, groups, h, integer_valued)
    }

    fn from_table(
        t: &Table,
        ages: &AgeSchema,
        groups: &GroupSchema,
        h: &Hierarchy,
        integer_valued: bool,
    ) -> Result<TabulationCube> {
        let mut level = None;
        let mut values: HashMap<String, Vec<Option<f64>>> = HashMap::new();
        let s = ages.len() * groups.len();
        for (line, rec) in &t.rows {
            let id = &rec[0];
            let idx = h
                .index_of(id)
                .ok_or_else(|| t.err(*line, format!("unknown unit id `{id}`")))?;
            let lvl = h.unit(idx).level;
            match level {
                None => level = Some(lvl),
                Some(l) if l != lvl => {
                    return Err(t.err(*line, format!("unit `{id}` is at level {lvl}, expected {l}")));
                }
                _ => {}
            }
            let a = ages
                .index_of(&rec[1])
                .ok_or_else(|| t.err(*line, format!("unknown age band `{}`", &rec[1])))?;
            let g = groups
                .index_of(&rec[2])
                .ok_or_else(|| t.err(*line, format!("unknown group `{}`", &rec[2])))?;
            let v = t.f64_at(*line, rec, 3)?;
            if integer_valued && (v < 0.0 || v.fract() != 0.0) {
                return Err(t.err(*line, format!("count must be a non-negative integer, found {v}")));
            }
            if !v.is_finite() {
                return Err(t.err(*line, "count is not finite"));
            }
            let slot = &mut values.entry(id.to_string()).or_insert_with(|| vec![None; s])[a * groups.len() + g];
            if slot.is_some() {
                return Err(t.err(*line, format!("duplicate cell ({id}, {}, {})", &rec[1], &rec[2])));
            }
            *slot = Some(v);
        }
        let level = level.ok_or_else(|| Error::InvalidInput(format!("{}: no data rows", t.path)))?;
        let units: Vec<String> = h
            .ids_at_level(level)
            .into_iter()
            .filter(|id| values.contains_key(id))
            .collect();
        let mut cells = Vec::with_capacity(units.len() * s);
        for id in &units {
            for (k, v) in values[id].iter().enumerate() {
                match v {
                    Some(v) => cells.push(*v),
                    None => {
                        let (a, g) = (k / groups.len(), k % groups.len());
                        return Err(Error::InvalidInput(format!(
                            "{}: missing cell ({id}, {}, {})",
                            t.path,
                            ages.bands()[a],
                            groups.groups()[g]
                        )));
                    }
                }
            }
        }
        TabulationCube::new(level, units, ages.clone(), groups.clone(), cells, integer_valued)
    }

    pub fn to_csv(&self, value_col: &str) -> Vec<u8> {
        let mut w = TableWriter::new(&["unit_id", "age_band", "group", value_col]);
        for (u, id) in self.units.iter().enumerate() {
            for (a, band) in self.ages.bands().iter().enumerate() {
                for (g, grp) in self.groups.groups().iter().enumerate() {
                    let v = self.get(u, a, g);
                    let text = if self.integer_valued {
                        format!("{}", v as i64)
                    } else {
                        fmt_sig(v, 10)
                    };
                    w.row([id.as_str(), band.as_str(), grp.as_str(), text.as_str()]);
                }
            }
        }
        w.into_bytes()
    }
}

/// Unit-level covariates, one named column per covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub units: Vec<String>,
    pub names: Vec<String>,
    /// `values[unit][covariate]`
    pub values: Vec<Vec<f64>>,
}

impl Covariates {
    pub fn get(&self, unit: &str, name: &str) -> Option<f64> {
        let u = self.units.iter().position(|x| x == unit)?;
        let c = self.names.iter().position(|x| x == name)?;
        Some(self.values[u][c])
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.names.iter().position(|x| x == name)?;
        Some(self.values.iter().map(|row| row[c]).collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let t = Table::read(path, &["unit_id", "name", "value"])?;
        let mut units: Vec<String> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let mut map: HashMap<(String, String), f64> = HashMap::new();
        for (line, rec) in &t.rows {
            let v = t.f64_at(*line, rec, 2)?;
            if !units.iter().any(|u| u == &rec[0]) {
                units.push(rec[0].to_string());
            }
            if !names.iter().any(|n| n == &rec[1]) {
                names.push(rec[1].to_string());
            }
            if map.insert((rec[0].to_string(), rec[1].to_string()), v).is_some() {
                return Err(t.err(*line, format!("duplicate covariate ({}, {})", &rec[0], &rec[1])));
            }
        }
        let mut values = Vec::with_capacity(units.len());
        for u in &units {
            let mut row = Vec::with_capacity(names.len());
            for n in &names {
                row.push(
                    *map.get(&(u.clone(), n.clone()))
                        .ok_or_else(|| Error::InvalidInput(format!("{}: covariate `{n}` missing for `{u}`", t.path)))?,
                );
            }
            values.push(row);
        }
        Ok(Covariates { units, names, values })
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["unit_id", "name", "value"]);
        for (u, id) in self.units.iter().enumerate() {
            for (c, n) in self.names.iter().enumerate() {
                w.row([id.as_str(), n.as_str(), fmt_sig(self.values[u][c], 10).as_str()]);
            }
        }
        w.into_bytes()
    }
}
