//! Nested geographies and leaf adjacency.
//!
//! A [`Hierarchy`] is the tree the disclosure avoidance mechanism walks from
//! the root down to the analysis level. An [`Adjacency`] is the binary
//! neighbourhood graph over the leaves used by the spatial model.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Table, TableWriter};
use crate::rng;

pub const MIN_DEPTH: usize = 2;
pub const MAX_DEPTH: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoLevel {
    pub rank: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoUnit {
    pub id: String,
    pub level: usize,
    pub parent: Option<String>,
}

/// Default level names for a hierarchy of the given depth.
pub fn default_level_names(depth: usize) -> Vec<String> {
    (0..depth)
        .map(|r| match r {
            0 => "state".to_string(),
            r if r == depth - 1 => "tract".to_string(),
            1 => "county".to_string(),
            r => format!("district{r}"),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    levels: Vec<GeoLevel>,
    units: Vec<GeoUnit>,
    index: HashMap<String, usize>,
    children: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    by_level: Vec<Vec<usize>>,
}

impl Hierarchy {
    /// Build the lookup structures without checking the tree invariants.
    /// Use [`validate`] (or [`Hierarchy::checked`]) before relying on them.
    pub fn from_units(levels: Vec<GeoLevel>, units: Vec<GeoUnit>) -> Self {
        let mut index = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            index.entry(u.id.clone()).or_insert(i);
        }
        let depth = levels.len().max(units.iter().map(|u| u.level + 1).max().unwrap_or(0));
        let mut by_level = vec![Vec::new(); depth];
        let mut children = vec![Vec::new(); units.len()];
        let mut parent = vec![None; units.len()];
        for (i, u) in units.iter().enumerate() {
            by_level[u.level].push(i);
            if let Some(p) = u.parent.as_ref().and_then(|p| index.get(p)) {
                parent[i] = Some(*p);
                children[*p].push(i);
            }
        }
        for ids in by_level.iter_mut().chain(children.iter_mut()) {
            ids.sort_by(|a, b| units[*a].id.cmp(&units[*b].id));
        }
        Hierarchy {
            levels,
            units,
            index,
            children,
            parent,
            by_level,
        }
    }

    pub fn checked(levels: Vec<GeoLevel>, units: Vec<GeoUnit>) -> Result<Self> {
        let h = Self::from_units(levels, units);
        let report = validate_tree(&h);
        if !report.is_empty() {
            return Err(Error::Geo(report.to_string()));
        }
        Ok(h)
    }

    pub fn depth(&self) -> usize {
        self.by_level.len()
    }

    pub fn leaf_rank(&self) -> usize {
        self.depth() - 1
    }

    pub fn levels(&self) -> &[GeoLevel] {
        &self.levels
    }

    pub fn units(&self) -> &[GeoUnit] {
        &self.units
    }

    pub fn unit(&self, idx: usize) -> &GeoUnit {
        &self.units[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Unit indices at a rank, ordered by id.
    pub fn at_level(&self, rank: usize) -> &[usize] {
        &self.by_level[rank]
    }

    pub fn ids_at_level(&self, rank: usize) -> Vec<String> {
        self.by_level[rank].iter().map(|&i| self.units[i].id.clone()).collect()
    }

    pub fn leaf_ids(&self) -> Vec<String> {
        self.ids_at_level(self.leaf_rank())
    }

    /// Children ordered by id.
    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn parent(&self, idx: usize) -> Option<usize> {
        self.parent[idx]
    }

    pub fn ancestor_at(&self, mut idx: usize, rank: usize) -> Option<usize> {
        while self.units[idx].level > rank {
            idx = self.parent[idx]?;
        }
        (self.units[idx].level == rank).then_some(idx)
    }

    pub fn root(&self) -> usize {
        self.by_level[0][0]
    }

    pub fn read(path: &Path) -> Result<Self> {
        let t = Table::read(path, &["unit_id", "level", "parent_id"])?;
        let mut units = Vec::with_capacity(t.rows.len());
        for (line, rec) in &t.rows {
            let level: usize = rec[1]
                .parse()
                .map_err(|_| t.err(*line, format!("bad level `{}`", &rec[1])))?;
            let parent = (!rec[2].is_empty()).then(|| rec[2].to_string());
            units.push(GeoUnit {
                id: rec[0].to_string(),
                level,
                parent,
            });
        }
        let depth = units.iter().map(|u| u.level + 1).max().unwrap_or(0);
        let levels = default_level_names(depth.max(1))
            .into_iter()
            .enumerate()
            .map(|(rank, name)| GeoLevel { rank, name })
            .collect();
        Self::checked(levels, units)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["unit_id", "level", "parent_id"]);
        for rank in 0..self.depth() {
            for &i in self.at_level(rank) {
                let u = &self.units[i];
                w.row([u.id.as_str(), &u.level.to_string(), u.parent.as_deref().unwrap_or("")]);
            }
        }
        w.into_bytes()
    }
}

/// Binary, possibly asymmetric neighbourhood weights over leaf ids. Rows are
/// stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    ids: Vec<String>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Adjacency {
    /// Symmetric adjacency from undirected edges given by index.
    pub fn from_edges(ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = ids.len();
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Geo(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::Geo(format!("self loop on `{}`", ids[a])));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        let rows = sets.into_iter().map(|s| s.into_iter().map(|k| (k, 1.0)).collect()).collect();
        Ok(Adjacency { ids, rows })
    }

    /// Directed weights as given, with no symmetry enforced.
    pub fn from_triplets(ids: Vec<String>, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows = vec![Vec::new(); ids.len()];
        for &(i, k, w) in triplets {
            rows[i].push((k, w));
        }
        for r in rows.iter_mut() {
            r.sort_by_key(|e| e.0);
        }
        Adjacency { ids, rows }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn weight(&self, i: usize, k: usize) -> f64 {
        self.rows[i].iter().find(|e| e.0 == k).map(|e| e.1).unwrap_or(0.0)
    }

    /// w_i+
    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|e| e.1).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.row_sum(i)).collect()
    }

    /// Undirected edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, row) in self.rows.iter().enumerate() {
            for &(b, w) in row {
                if a < b && w != 0.0 {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &(k, w) in &self.rows[i] {
                if w != 0.0 && !seen[k] {
                    seen[k] = true;
                    count += 1;
                    queue.push_back(k);
                }
            }
        }
        count == self.len()
    }

    /// Permute rows and columns into the order of `ids`.
    pub fn reordered(&self, ids: &[String]) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::Geo(format!(
                "adjacency has {} units, expected {}",
                self.len(),
                ids.len()
            )));
        }
        let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut map = Vec::with_capacity(self.len());
        for id in &self.ids {
            map.push(*pos.get(id.as_str()).ok_or_else(|| Error::Geo(format!("unit `{id}` not in target order")))?);
        }
        let mut rows = vec![Vec::new(); self.len()];
        for (old, row) in self.rows.iter().enumerate() {
            let mut r: Vec<(usize, f64)> = row.iter().map(|&(k, w)| (map[k], w)).collect();
            r.sort_by_key(|e| e.0);
            rows[map[old]] = r;
        }
        Ok(Adjacency { ids: ids.to_vec(), rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let t = Table::read(path, &["unit_a", "unit_b"])?;
        let mut ids: Vec<String> = Vec::new();
        let mut pos: HashMap<String, usize> = HashMap::new();
        let mut edges = Vec::new();
        for (_, rec) in &t.rows {
            let mut idx = |s: &str| {
                *pos.entry(s.to_string()).or_insert_with(|| {
                    ids.push(s.to_string());
                    ids.len() - 1
                })
            };
            let a = idx(&rec[0]);
            let b = idx(&rec[1]);
            edges.push((a, b));
        }
        // canonical order: sorted ids
        let mut sorted = ids.clone();
        sorted.sort();
        Adjacency::from_edges(ids, &edges)?.reordered(&sorted)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = TableWriter::new(&["unit_a", "unit_b"]);
        for (a, b) in self.edges() {
            w.row([self.ids[a].as_str(), self.ids[b].as_str()]);
        }
        w.into_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId(String),
    MissingParent { unit: String, parent: Option<String> },
    WrongParentLevel { unit: String, parent: String },
    RootCount(usize),
    NonContiguousLevels,
    Depth(usize),
    Unreachable(String),
    ChildlessInternal(String),
    Asymmetric { a: String, b: String },
    SelfLoop(String),
    NonBinaryWeight { a: String, b: String },
    Island(String),
    UnknownLeaf(String),
    MissingLeaf(String),
    Disconnected,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate unit id `{id}`"),
            Violation::MissingParent { unit, parent } => match parent {
                Some(p) => write!(f, "unit `{unit}` names unknown parent `{p}`"),
                None => write!(f, "non-root unit `{unit}` has no parent"),
            },
            Violation::WrongParentLevel { unit, parent } => {
                write!(f, "parent `{parent}` of `{unit}` is not exactly one level up")
            }
            Violation::RootCount(n) => write!(f, "expected exactly one root unit, found {n}"),
            Violation::NonContiguousLevels => write!(f, "level ranks are not contiguous from 0"),
            Violation::Depth(d) => write!(f, "depth {d} outside {MIN_DEPTH}..={MAX_DEPTH}"),
            Violation::Unreachable(id) => write!(f, "unit `{id}` is not reachable from the root"),
            Violation::ChildlessInternal(id) => write!(f, "internal unit `{id}` has no children"),
            Violation::Asymmetric { a, b } => write!(f, "asymmetric weight between `{a}` and `{b}`"),
            Violation::SelfLoop(id) => write!(f, "nonzero diagonal weight at `{id}`"),
            Violation::NonBinaryWeight { a, b } => write!(f, "weight between `{a}` and `{b}` is not 0/1"),
            Violation::Island(id) => write!(f, "leaf `{id}` has no neighbours"),
            Violation::UnknownLeaf(id) => write!(f, "adjacency names `{id}`, which is not a leaf"),
            Violation::MissingLeaf(id) => write!(f, "leaf `{id}` is missing from the adjacency"),
            Violation::Disconnected => write!(f, "adjacency graph is disconnected"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

fn validate_tree(h: &Hierarchy) -> ValidationReport {
    let mut v = Vec::new();
    let mut seen = HashMap::new();
    for u in &h.units {
        if seen.insert(u.id.as_str(), ()).is_some() {
            v.push(Violation::DuplicateId(u.id.clone()));
        }
    }
    let depth = h.depth();
    if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
        v.push(Violation::Depth(depth));
    }
    if h.by_level.iter().any(|l| l.is_empty()) {
        v.push(Violation::NonContiguousLevels);
    }
    let roots = h.units.iter().filter(|u| u.level == 0).count();
    if roots != 1 {
        v.push(Violation::RootCount(roots));
    }
    for (i, u) in h.units.iter().enumerate() {
        if u.level == 0 {
            if u.parent.is_some() {
                v.push(Violation::WrongParentLevel {
                    unit: u.id.clone(),
                    parent: u.parent.clone().unwrap_or_default(),
                });
            }
            continue;
        }
        match h.parent[i] {
            None => v.push(Violation::MissingParent {
                unit: u.id.clone(),
                parent: u.parent.clone(),
            }),
            Some(p) if h.units[p].level + 1 != u.level => v.push(Violation::WrongParentLevel {
                unit: u.id.clone(),
                parent: h.units[p].id.clone(),
            }),
            _ => {}
        }
        if u.level + 1 < depth && h.children[i].is_empty() {
            v.push(Violation::ChildlessInternal(u.id.clone()));
        }
    }
    if roots == 1 {
        let root = h.by_level[0][0];
        if h.children[root].is_empty() && depth > 1 {
            v.push(Violation::ChildlessInternal(h.units[root].id.clone()));
        }
        // depth-first traversal must visit each unit exactly once
        let mut visited = vec![false; h.units.len()];
        let mut stack = vec![root];
        while let Some(i) = stack.pop() {
            if visited[i] {
                continue;
            }
            visited[i] = true;
            stack.extend(h.children[i].iter().copied());
        }
        for (i, ok) in visited.iter().enumerate() {
            if !ok && !v.iter().any(|x| matches!(x, Violation::MissingParent { unit, .. } if *unit == h.units[i].id)) {
                v.push(Violation::Unreachable(h.units[i].id.clone()));
            }
        }
    }
    ValidationReport { violations: v }
}

fn validate_adjacency(h: &Hierarchy, a: &Adjacency) -> ValidationReport {
    let mut v = Vec::new();
    let leaves: BTreeSet<String> = if h.depth() > 0 { h.leaf_ids().into_iter().collect() } else { BTreeSet::new() };
    let adj_ids: BTreeSet<&String> = a.ids.iter().collect();
    for id in &a.ids {
        if !leaves.contains(id) {
            v.push(Violation::UnknownLeaf(id.clone()));
        }
    }
    for id in &leaves {
        if !adj_ids.contains(id) {
            v.push(Violation::MissingLeaf(id.clone()));
        }
    }
    for (i, row) in a.rows.iter().enumerate() {
        for &(k, w) in row {
            if k == i && w != 0.0 {
                v.push(Violation::SelfLoop(a.ids[i].clone()));
                continue;
            }
            if w != 0.0 && w != 1.0 {
                v.push(Violation::NonBinaryWeight {
                    a: a.ids[i].clone(),
                    b: a.ids[k].clone(),
                });
            }
            let flagged = if i < k {
                a.weight(k, i) != w
            } else {
                // the pair is checked from row k unless row k lacks the entry
                !a.rows[k].iter().any(|e| e.0 == i)
            };
            if flagged {
                v.push(Violation::Asymmetric {
                    a: a.ids[i.min(k)].clone(),
                    b: a.ids[i.max(k)].clone(),
                });
            }
        }
        if a.row_sum(i) < 1.0 {
            v.push(Violation::Island(a.ids[i].clone()));
        }
    }
    if !a.is_empty() && !a.is_connected() {
        v.push(Violation::Disconnected);
    }
    ValidationReport { violations: v }
}

/// Check the tree and the adjacency. An empty report means every invariant
/// holds.
pub fn validate(h: &Hierarchy, a: &Adjacency) -> ValidationReport {
    let mut r = validate_tree(h);
    r.violations.extend(validate_adjacency(h, a).violations);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Grid,
    RandomPlanar,
}

/// Rows and columns of the most nearly square grid holding `n` cells exactly.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let mut r = (n as f64).sqrt().floor() as usize;
    while r > 1 && n % r != 0 {
        r -= 1;
    }
    (r.max(1), n / r.max(1))
}

/// Build a synthetic hierarchy with `n_leaves` leaves under fan-outs
/// `branching` (one entry per level below the root) together with a
/// connected leaf adjacency.
pub fn build_synthetic_geography(
    n_leaves: usize,
    branching: &[usize],
    layout: Layout,
    seed: u64,
) -> Result<(Hierarchy, Adjacency)> {
    if n_leaves < 4 {
        return Err(Error::Geo(format!("need at least 4 leaves, got {n_leaves}")));
    }
    let depth = branching.len() + 1;
    if !(MIN_DEPTH..=MAX_DEPTH).contains(&depth) {
        return Err(Error::Geo(format!("branching gives depth {depth}, outside {MIN_DEPTH}..={MAX_DEPTH}")));
    }
    if branching.contains(&0) {
        return Err(Error::Geo("branching factors must be positive".into()));
    }
    let slots: usize = branching.iter().product();
    if slots < n_leaves {
        return Err(Error::Geo(format!(
            "branching {branching:?} holds {slots} leaves, fewer than {n_leaves}"
        )));
    }

    // leaf order: row-major for grids, by x coordinate for random layouts
    let (leaf_edges, order) = match layout {
        Layout::Grid => {
            let (r, c) = grid_shape(n_leaves);
            let mut edges = Vec::with_capacity(2 * n_leaves);
            for i in 0..r {
                for j in 0..c {
                    let a = i * c + j;
                    if j + 1 < c {
                        edges.push((a, a + 1));
                    }
                    if i + 1 < r {
                        edges.push((a, a + c));
                    }
                }
            }
            (edges, (0..n_leaves).collect::<Vec<_>>())
        }
        Layout::RandomPlanar => random_planar(n_leaves, seed),
    };

    let names = default_level_names(depth);
    let levels: Vec<GeoLevel> = names
        .iter()
        .enumerate()
        .map(|(rank, name)| GeoLevel { rank, name: name.clone() })
        .collect();

    // leaf i occupies slot floor(i * slots / n); ancestors follow from the
    // mixed-radix digits of the slot
    let suffix: Vec<usize> = (0..depth)
        .map(|r| branching[r.min(branching.len())..].iter().product::<usize>())
        .collect();
    let slot_of = |i: usize| i * slots / n_leaves;
    let mut units = vec![GeoUnit {
        id: names[0].clone(),
        level: 0,
        parent: None,
    }];
    let mut prev_ids: Vec<String> = vec![names[0].clone(); n_leaves];
    for rank in 1..depth {
        let mut ids = Vec::with_capacity(n_leaves);
        let mut last_key = usize::MAX;
        let mut counter = 0usize;
        for (pos, prev) in prev_ids.iter().enumerate() {
            let key = slot_of(pos) / suffix[rank];
            if key != last_key {
                counter += 1;
                last_key = key;
                units.push(GeoUnit {
                    id: format!("{}-{:05}", names[rank], counter),
                    level: rank,
                    parent: Some(prev.clone()),
                });
            }
            ids.push(units.last().unwrap().id.clone());
        }
        prev_ids = ids;
    }
    let h = Hierarchy::checked(levels, units)?;

    // leaf ids in layout order -> adjacency indices
    let leaf_ids: Vec<String> = {
        let mut by_pos = vec![String::new(); n_leaves];
        for (point, &pos) in order.iter().enumerate() {
            by_pos[point] = prev_ids[pos].clone();
        }
        by_pos
    };
    let adj = Adjacency::from_edges(leaf_ids, &leaf_edges)?.reordered(&h.leaf_ids())?;
    if !adj.is_connected() {
        return Err(Error::Geo("layout produced a disconnected adjacency".into()));
    }
    if let Some(i) = (0..adj.len()).find(|&i| adj.row_sum(i) < 1.0) {
        return Err(Error::Geo(format!("leaf `{}` is an island", adj.ids()[i])));
    }
    Ok((h, adj))
}

/// Gabriel graph over uniform random points. Returns edges between point
/// indices and the point indices sorted by x coordinate.
fn random_planar(n: usize, seed: u64) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut r = rng::stream(seed, &["geo", "random-planar"]);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (r.random::<f64>(), r.random::<f64>())).collect();
    let d2 = |a: usize, b: usize| {
        let dx = pts[a].0 - pts[b].0;
        let dy = pts[a].1 - pts[b].1;
        dx * dx + dy * dy
    };
    let k = 16.min(n - 1);
    let mut edges = BTreeSet::new();
    for a in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        cand.sort_by(|&x, &y| d2(a, x).total_cmp(&d2(a, y)));
        for &b in cand.iter().take(k) {
            // Gabriel condition: no third point inside the circle on diameter ab
            let mid = ((pts[a].0 + pts[b].0) / 2.0, (pts[a].1 + pts[b].1) / 2.0);
            let rad2 = d2(a, b) / 4.0;
            let blocked = cand.iter().take(k).any(|&c| {
                c != b && {
                    let dx = pts[c].0 - mid.0;
                    let dy = pts[c].1 - mid.1;
                    dx * dx + dy * dy < rad2
                }
            });
            if !blocked {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts[a].0.total_cmp(&pts[b].0).then(pts[a].1.total_cmp(&pts[b].1)));
    // `order[pos]` is the point at sorted position pos; the caller expects
    // `order[point] = pos`
    let mut pos_of = vec![0; n];
    for (pos, &p) in order.iter().enumerate() {
        pos_of[p] = pos;
    }
    (edges.into_iter().collect(), pos_of)
}
