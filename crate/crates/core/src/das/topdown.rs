//! Noise injection at every level of the hierarchy followed by top-down
//! reconciliation into non-negative, hierarchically consistent integers.

use std::collections::HashMap;

use rayon::prelude::*;

use super::budget::{DasConfig, PassMode};
use super::project::{project_children, project_table};
use super::round::{controlled_round, controlled_round_table};
use crate::error::{Error, Result};
use crate::geo::Hierarchy;
use crate::io::TableWriter;
use crate::rng;
use crate::stats::fmt_sig;
use crate::tabulation::TabulationCube;

const TOTAL_LABEL: &str = "*";
const TABLE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub unit_id: String,
    pub age_band: String,
    pub group: String,
    pub epsilon: f64,
    pub noise: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DasAudit {
    pub level_epsilon: Vec<f64>,
    pub entries: Vec<AuditEntry>,
}

impl DasAudit {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["unit_id", "age_band", "group", "epsilon", "noise"]);
        for e in &self.entries {
            w.row([
                e.unit_id.as_str(),
                e.age_band.as_str(),
                e.group.as_str(),
                fmt_sig(e.epsilon, 10).as_str(),
                e.noise.to_string().as_str(),
            ]);
        }
        w.into_bytes()
    }
}

/// Real-valued noisy measurements, root level first.
#[derive(Debug, Clone)]
pub struct NoisyMeasurements {
    pub detail: Vec<TabulationCube>,
    /// Noisy unit totals per level for multi-pass variants. The root total
    /// is exact.
    pub totals: Option<Vec<Vec<f64>>>,
    pub audit: DasAudit,
}

#[derive(Debug, Clone)]
pub struct TopDownOutput {
    /// Published cubes, root level first.
    pub levels: Vec<TabulationCube>,
    pub audit: DasAudit,
}

impl TopDownOutput {
    pub fn leaf(&self) -> &TabulationCube {
        self.levels.last().expect("at least one level")
    }
}

fn cell_noise(config: &DasConfig, pass: &str, rank: usize, unit: &str, stratum: usize, eps: f64) -> i64 {
    let mut r = rng::stream(config.seed, &["das", pass, &rank.to_string(), unit, &stratum.to_string()]);
    config.noise.sample(eps, &mut r)
}

fn check_levels(levels: &[TabulationCube], h: &Hierarchy) -> Result<()> {
    if levels.len() != h.depth() {
        return Err(Error::InvalidInput(format!(
            "expected {} level cubes, got {}",
            h.depth(),
            levels.len()
        )));
    }
    for (rank, cube) in levels.iter().enumerate() {
        if cube.level() != rank || cube.units() != h.ids_at_level(rank).as_slice() {
            return Err(Error::InvalidInput(format!("missing or misaligned cube for level {rank}")));
        }
    }
    Ok(())
}

/// Add independent noise to every cell of every level. With an unlimited
/// budget the measurements equal the input.
pub fn inject_noise(levels: &[TabulationCube], h: &Hierarchy, config: &DasConfig) -> Result<NoisyMeasurements> {
    check_levels(levels, h)?;
    config.check(h.depth())?;
    let budget = &config.budget;
    let multi = config.passes == PassMode::Multi;
    if budget.is_unlimited() {
        return Ok(NoisyMeasurements {
            detail: levels.to_vec(),
            totals: multi.then(|| levels.iter().map(|c| (0..c.units().len()).map(|u| c.unit_total(u)).collect()).collect()),
            audit: DasAudit {
                level_epsilon: vec![f64::INFINITY; h.depth()],
                entries: Vec::new(),
            },
        });
    }
    let detail_pass = if multi { 1 } else { 0 };
    let mut entries = Vec::new();
    let mut detail = Vec::with_capacity(levels.len());
    for (rank, cube) in levels.iter().enumerate() {
        let eps = budget.query_epsilon(rank, detail_pass);
        let s = cube.n_strata();
        let noise: Vec<Vec<i64>> = cube
            .units()
            .par_iter()
            .map(|id| (0..s).map(|k| cell_noise(config, "detail", rank, id, k, eps)).collect())
            .collect();
        let mut cells = cube.cells().to_vec();
        for (u, row) in noise.iter().enumerate() {
            for (k, &z) in row.iter().enumerate() {
                cells[u * s + k] += z as f64;
                let (a, g) = cube.stratum_parts(k);
                entries.push(AuditEntry {
                    unit_id: cube.units()[u].clone(),
                    age_band: cube.ages().bands()[a].clone(),
                    group: cube.groups().groups()[g].clone(),
                    epsilon: eps,
                    noise: z,
                });
            }
        }
        detail.push(cube.with_cells(cells, false)?);
    }
    let totals = if multi {
        let mut all = Vec::with_capacity(levels.len());
        for (rank, cube) in levels.iter().enumerate() {
            let exact: Vec<f64> = (0..cube.units().len()).map(|u| cube.unit_total(u)).collect();
            if rank == 0 {
                all.push(exact);
                continue;
            }
            let eps = budget.query_epsilon(rank, 0);
            let noise: Vec<i64> = cube
                .units()
                .par_iter()
                .map(|id| cell_noise(config, "total", rank, id, 0, eps))
                .collect();
            for (id, &z) in cube.units().iter().zip(&noise) {
                entries.push(AuditEntry {
                    unit_id: id.clone(),
                    age_band: TOTAL_LABEL.into(),
                    group: TOTAL_LABEL.into(),
                    epsilon: eps,
                    noise: z,
                });
            }
            all.push(exact.iter().zip(&noise).map(|(t, &z)| t + z as f64).collect());
        }
        Some(all)
    } else {
        None
    };
    let level_epsilon = (0..h.depth()).map(|r| budget.level_epsilon(r)).collect();
    Ok(NoisyMeasurements {
        detail,
        totals,
        audit: DasAudit { level_epsilon, entries },
    })
}

/// Positions of hierarchy unit indices within their level's cube.
fn level_positions(h: &Hierarchy) -> HashMap<usize, usize> {
    let mut pos = HashMap::new();
    for rank in 0..h.depth() {
        for (p, &i) in h.at_level(rank).iter().enumerate() {
            pos.insert(i, p);
        }
    }
    pos
}

fn round_to_target(values: &[f64], target: f64) -> Result<Vec<f64>> {
    let x = project_children(target, values);
    Ok(controlled_round(&x, target as i64)?.into_iter().map(|v| v as f64).collect())
}

/// Run the mechanism on a true leaf-level cube and return every published
/// level together with the audit trail.
pub fn run_topdown(truth: &TabulationCube, h: &Hierarchy, config: &DasConfig) -> Result<TopDownOutput> {
    if !truth.is_integer_valued() {
        return Err(Error::InvalidInput("the true cube must be integer valued".into()));
    }
    if truth.level() != h.leaf_rank() {
        return Err(Error::InvalidInput("the true cube must be at the leaf level".into()));
    }
    config.check(h.depth())?;
    let levels = truth.leveled(h)?;
    if config.budget.is_unlimited() {
        return Ok(TopDownOutput {
            levels,
            audit: DasAudit {
                level_epsilon: vec![f64::INFINITY; h.depth()],
                entries: Vec::new(),
            },
        });
    }
    let noisy = inject_noise(&levels, h, config)?;
    let pos = level_positions(h);
    let grand_total = truth.total();
    let s = truth.n_strata();

    // root detail, constrained to the exact grand total
    let root_detail = round_to_target(noisy.detail[0].unit_cells(0), grand_total)?;
    let mut published = vec![levels[0].with_cells(root_detail, true)?];

    match config.passes {
        PassMode::Single => {
            for rank in 1..h.depth() {
                let parent_cube = &published[rank - 1];
                let noisy_cube = &noisy.detail[rank];
                let blocks: Vec<Vec<(usize, Vec<f64>)>> = h
                    .at_level(rank - 1)
                    .par_iter()
                    .map(|&p| -> Result<Vec<(usize, Vec<f64>)>> {
                        let kids = h.children(p);
                        let kid_pos: Vec<usize> = kids.iter().map(|k| pos[k]).collect();
                        let parent_cells = parent_cube.unit_cells(pos[&p]);
                        let mut out: Vec<Vec<f64>> = vec![vec![0.0; s]; kids.len()];
                        for k in 0..s {
                            let vals: Vec<f64> = kid_pos.iter().map(|&c| noisy_cube.unit_cells(c)[k]).collect();
                            let rounded = round_to_target(&vals, parent_cells[k])?;
                            for (o, v) in out.iter_mut().zip(rounded) {
                                o[k] = v;
                            }
                        }
                        Ok(kid_pos.into_iter().zip(out).collect())
                    })
                    .collect::<Result<_>>()?;
                published.push(assemble(&levels[rank], blocks)?);
            }
        }
        PassMode::Multi => {
            let noisy_totals = noisy.totals.as_ref().expect("multi-pass totals");
            // pass 1: unit totals
            let mut totals: Vec<Vec<f64>> = vec![vec![grand_total]];
            for rank in 1..h.depth() {
                let mut level_tot = vec![0.0; h.at_level(rank).len()];
                for &p in h.at_level(rank - 1) {
                    let kid_pos: Vec<usize> = h.children(p).iter().map(|k| pos[k]).collect();
                    let vals: Vec<f64> = kid_pos.iter().map(|&c| noisy_totals[rank][c]).collect();
                    let rounded = round_to_target(&vals, totals[rank - 1][pos[&p]])?;
                    for (c, v) in kid_pos.into_iter().zip(rounded) {
                        level_tot[c] = v;
                    }
                }
                totals.push(level_tot);
            }
            // pass 2: detail agreeing with pass-1 totals and parent detail
            for rank in 1..h.depth() {
                let parent_cube = &published[rank - 1];
                let noisy_cube = &noisy.detail[rank];
                let level_tot = &totals[rank];
                let blocks: Vec<Vec<(usize, Vec<f64>)>> = h
                    .at_level(rank - 1)
                    .par_iter()
                    .map(|&p| -> Result<Vec<(usize, Vec<f64>)>> {
                        let kid_pos: Vec<usize> = h.children(p).iter().map(|k| pos[k]).collect();
                        let table: Vec<Vec<f64>> = kid_pos.iter().map(|&c| noisy_cube.unit_cells(c).to_vec()).collect();
                        let row_t: Vec<f64> = kid_pos.iter().map(|&c| level_tot[c]).collect();
                        let col_t = parent_cube.unit_cells(pos[&p]).to_vec();
                        let x = project_table(&table, &row_t, &col_t, TABLE_TOL)?;
                        let rows_i: Vec<i64> = row_t.iter().map(|&v| v as i64).collect();
                        let cols_i: Vec<i64> = col_t.iter().map(|&v| v as i64).collect();
                        let z = controlled_round_table(&x, &rows_i, &cols_i)?;
                        Ok(kid_pos
                            .into_iter()
                            .zip(z)
                            .map(|(c, row)| (c, row.into_iter().map(|v| v as f64).collect()))
                            .collect())
                    })
                    .collect::<Result<_>>()?;
                published.push(assemble(&levels[rank], blocks)?);
            }
        }
    }
    let out = TopDownOutput {
        levels: published,
        audit: noisy.audit,
    };
    check_consistency(&out.levels, h, grand_total)?;
    Ok(out)
}

fn assemble(shape: &TabulationCube, blocks: Vec<Vec<(usize, Vec<f64>)>>) -> Result<TabulationCube> {
    let s = shape.n_strata();
    let mut cells = vec![0.0; shape.cells().len()];
    for (c, row) in blocks.into_iter().flatten() {
        cells[c * s..(c + 1) * s].copy_from_slice(&row);
    }
    shape.with_cells(cells, true)
}

/// Every published cell is a non-negative integer, every parent cell is the
/// sum of its children's cells, and the root total matches `grand_total`.
pub fn check_consistency(levels: &[TabulationCube], h: &Hierarchy, grand_total: f64) -> Result<()> {
    let pos = level_positions(h);
    for cube in levels {
        if let Some(v) = cube.cells().iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Contract(format!("published cell {v} is not a non-negative integer")));
        }
    }
    if levels[0].total() != grand_total {
        return Err(Error::Contract(format!(
            "published grand total {} differs from {grand_total}",
            levels[0].total()
        )));
    }
    for rank in 0..h.leaf_rank() {
        for &p in h.at_level(rank) {
            let parent = levels[rank].unit_cells(pos[&p]);
            for (k, &pv) in parent.iter().enumerate() {
                let sum: f64 = h.children(p).iter().map(|c| levels[rank + 1].unit_cells(pos[c])[k]).sum();
                if sum != pv {
                    return Err(Error::Contract(format!(
                        "unit `{}` stratum {k}: parent {pv} but children sum to {sum}",
                        h.unit(p).id
                    )));
                }
            }
        }
    }
    Ok(())
}
