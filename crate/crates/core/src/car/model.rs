//! Design of the spatial Poisson log-linear model: covariates, offsets,
//! random-effect structure and priors.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::prior::CarGraph;
use crate::error::{Error, Result};
use crate::geo::Adjacency;
use crate::standardize::ExpectedCounts;
use crate::stats::{mean, sd};
use crate::tabulation::Covariates;

/// Handling of cells whose expected count is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "value")]
pub enum ZeroOffset {
    /// Drop the cell from the likelihood.
    Exclude,
    /// Replace a zero expected count by this positive floor.
    Floor(f64),
}

impl Default for ZeroOffset {
    fn default() -> Self {
        ZeroOffset::Exclude
    }
}

/// How centred unit covariates are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateScale {
    /// Proportions expressed in percentage points.
    #[default]
    PercentPoints,
    /// Divided by the sample standard deviation over units.
    Sd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Priors {
    /// Normal prior variance of every coefficient.
    pub beta_var: f64,
    /// Inverse-gamma shape and scale of the spatial variance.
    pub tau2_shape: f64,
    pub tau2_scale: f64,
    /// Inverse-gamma shape and scale of the unstructured variance.
    pub sigma2_shape: f64,
    pub sigma2_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            beta_var: 1e5,
            tau2_shape: 1.0,
            tau2_scale: 0.01,
            sigma2_shape: 1.0,
            sigma2_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    /// Unit covariates entered as columns, in order.
    pub covariates: Vec<String>,
    pub covariate_scale: CovariateScale,
    pub zero_offset: ZeroOffset,
    pub spatial: bool,
    pub unstructured: bool,
    pub priors: Priors,
    /// Fix the spatial variance instead of sampling it.
    pub pin_tau2: Option<f64>,
    pub pin_sigma2: Option<f64>,
    pub pin_rho: Option<f64>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            covariates: vec!["prop_pov".into()],
            covariate_scale: CovariateScale::default(),
            zero_offset: ZeroOffset::default(),
            spatial: true,
            unstructured: true,
            priors: Priors::default(),
            pin_tau2: None,
            pin_sigma2: None,
            pin_rho: None,
        }
    }
}

impl ModelOptions {
    pub fn check(&self) -> Result<()> {
        let p = &self.priors;
        for (name, v) in [
            ("beta_var", p.beta_var),
            ("tau2_shape", p.tau2_shape),
            ("tau2_scale", p.tau2_scale),
            ("sigma2_shape", p.sigma2_shape),
            ("sigma2_scale", p.sigma2_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior {name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("pin_tau2", self.pin_tau2), ("pin_sigma2", self.pin_sigma2)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if let Some(r) = self.pin_rho {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("pin_rho must lie in [0, 1), got {r}")));
            }
        }
        if let ZeroOffset::Floor(f) = self.zero_offset {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::Config(format!("zero-offset floor must be positive, got {f}")));
            }
        }
        Ok(())
    }
}

/// Affine transform applied to a covariate: `(x - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub name: String,
    pub center: f64,
    pub scale: f64,
}

/// One (unit, group) observation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub unit: usize,
    pub group: usize,
    pub x: Vec<f64>,
    /// Expected count used as the offset after the zero rule; 0 when the
    /// cell is excluded.
    pub expected: f64,
    pub included: bool,
    /// The expected count was zero and has been floored.
    pub floored: bool,
}

impl Cell {
    pub fn offset(&self) -> f64 {
        self.expected.ln()
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub source: String,
    pub units: Vec<String>,
    pub groups: Vec<String>,
    pub columns: Vec<String>,
    pub scalings: Vec<Scaling>,
    /// Cells in `unit * G + group` order.
    pub cells: Vec<Cell>,
    pub graph: Arc<CarGraph>,
    pub options: ModelOptions,
}

impl ModelSpec {
    /// Design with an intercept, one indicator per non-reference group and
    /// the requested centred, scaled unit covariates.
    pub fn build(expected: &ExpectedCounts, covariates: &Covariates, graph: Arc<CarGraph>, options: ModelOptions) -> Result<Self> {
        options.check()?;
        if graph.adjacency().ids() != expected.units.as_slice() {
            return Err(Error::Model("adjacency and expected counts list different units".into()));
        }
        let g_n = expected.n_groups();
        let mut columns = vec!["intercept".to_string()];
        columns.extend(expected.groups.groups()[1..].iter().map(|g| format!("group:{g}")));
        let mut cov_cols = Vec::new();
        let mut scalings = Vec::new();
        for name in &options.covariates {
            let raw: Vec<f64> = expected
                .units
                .iter()
                .map(|u| {
                    covariates
                        .get(u, name)
                        .ok_or_else(|| Error::Model(format!("covariate `{name}` missing for unit `{u}`")))
                })
                .collect::<Result<_>>()?;
            let center = mean(&raw);
            let scale = match options.covariate_scale {
                CovariateScale::PercentPoints => 0.01,
                CovariateScale::Sd => sd(&raw),
            };
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Model(format!("covariate `{name}` has no spread to scale by")));
            }
            cov_cols.push(raw.iter().map(|v| (v - center) / scale).collect::<Vec<f64>>());
            scalings.push(Scaling {
                name: name.clone(),
                center,
                scale,
            });
            columns.push(name.clone());
        }
        let mut cells = Vec::with_capacity(expected.values.len());
        for u in 0..expected.units.len() {
            for g in 0..g_n {
                let mut x = vec![1.0];
                x.extend((1..g_n).map(|k| if k == g { 1.0 } else { 0.0 }));
                x.extend(cov_cols.iter().map(|c| c[u]));
                let p = expected.get(u, g);
                let (expected, included) = match (p > 0.0, options.zero_offset) {
                    (true, _) => (p, true),
                    (false, ZeroOffset::Exclude) => (0.0, false),
                    (false, ZeroOffset::Floor(f)) => (f, true),
                };
                cells.push(Cell {
                    unit: u,
                    group: g,
                    x,
                    expected,
                    included,
                    floored: p <= 0.0 && included,
                });
            }
        }
        Ok(ModelSpec {
            source: expected.source.clone(),
            units: expected.units.clone(),
            groups: expected.groups.groups().to_vec(),
            columns,
            scalings,
            cells,
            graph,
            options,
        })
    }

    /// A spec without spatial structure from explicit rows, for reduced
    /// models and tests. Units are one per row; the graph is a ring so the
    /// spec stays well formed.
    pub fn from_rows(columns: Vec<String>, rows: Vec<Vec<f64>>, expected: Vec<f64>, options: ModelOptions) -> Result<Self> {
        if rows.len() != expected.len() || rows.len() < 3 {
            return Err(Error::InvalidInput("need at least three rows with matching offsets".into()));
        }
        if rows.iter().any(|r| r.len() != columns.len()) {
            return Err(Error::InvalidInput("row width does not match the column list".into()));
        }
        let n = rows.len();
        let units: Vec<String> = (0..n).map(|i| format!("r{i:06}")).collect();
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let graph = Arc::new(CarGraph::new(Adjacency::from_edges(units.clone(), &edges)?)?);
        let cells = rows
            .into_iter()
            .zip(expected)
            .enumerate()
            .map(|(i, (x, p))| Cell {
                unit: i,
                group: 0,
                x,
                expected: if p > 0.0 { p } else { 0.0 },
                included: p > 0.0,
                floored: false,
            })
            .collect();
        Ok(ModelSpec {
            source: "rows".into(),
            units,
            groups: vec!["all".into()],
            columns,
            scalings: Vec::new(),
            cells,
            graph,
            options,
        })
    }

    pub fn n_coef(&self) -> usize {
        self.columns.len()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn included(&self) -> impl Iterator<Item = (usize, &Cell)> {
        self.cells.iter().enumerate().filter(|(_, c)| c.included)
    }

    pub fn n_included(&self) -> usize {
        self.cells.iter().filter(|c| c.included).count()
    }

    /// Drop cells where `keep` is false, so that fits of several sources
    /// share one set of observations.
    pub fn restrict(&mut self, keep: &[bool]) -> Result<()> {
        if keep.len() != self.cells.len() {
            return Err(Error::Model(format!("{} flags for {} cells", keep.len(), self.cells.len())));
        }
        for (c, &k) in self.cells.iter_mut().zip(keep) {
            if !k {
                c.included = false;
                c.floored = false;
                c.expected = 0.0;
            }
        }
        Ok(())
    }

    /// Linear predictor without random effects or offset.
    pub fn fixed(&self, cell: usize, beta: &[f64]) -> f64 {
        self.cells[cell].x.iter().zip(beta).map(|(x, b)| x * b).sum()
    }
}
