//! Controlled rounding: integer vectors and tables that keep fixed totals
//! while every entry moves to an adjacent integer.

use std::collections::VecDeque;

use crate::error::{Error, Result};

const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Largest-remainder rounding of `values` to integers summing to `target`.
/// Ties between equal remainders go to the lower index, so callers pass
/// units in ascending id order.
pub fn controlled_round(values: &[f64], target: i64) -> Result<Vec<i64>> {
    if target < 0 {
        return Err(Error::InvalidInput(format!("rounding target {target} is negative")));
    }
    let vals: Vec<f64> = values.iter().map(|&v| snap(v)).collect();
    if let Some(v) = vals.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("cannot round value {v}")));
    }
    let mut out: Vec<i64> = vals.iter().map(|v| v.floor() as i64).collect();
    let deficit = target - out.iter().sum::<i64>();
    let mut frac: Vec<(usize, f64)> = vals
        .iter()
        .enumerate()
        .filter(|(_, v)| v.fract() > 0.0)
        .map(|(i, v)| (i, v.fract()))
        .collect();
    if deficit < 0 || deficit as usize > frac.len() {
        return Err(Error::InvalidInput(format!(
            "values sum to {} which cannot be rounded to {target} entrywise",
            values.iter().sum::<f64>()
        )));
    }
    frac.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(i, _) in frac.iter().take(deficit as usize) {
        out[i] += 1;
    }
    Ok(out)
}

/// Round a non-negative table to integers with exact row and column sums,
/// each entry becoming the floor or ceiling of its input (after snapping
/// values within 1e-9 of an integer). Among such tables the one nearest in
/// L1 distance is chosen by a min-cost flow over the fractional parts.
pub fn controlled_round_table(x: &[Vec<f64>], row_targets: &[i64], col_targets: &[i64]) -> Result<Vec<Vec<i64>>> {
    let rows = x.len();
    let cols = col_targets.len();
    let mut base = vec![vec![0i64; cols]; rows];
    let mut frac = vec![vec![0.0f64; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            let v = snap(x[r][c]).max(0.0);
            base[r][c] = v.floor() as i64;
            frac[r][c] = v - v.floor();
        }
    }
    let row_need: Vec<i64> = (0..rows).map(|r| row_targets[r] - base[r].iter().sum::<i64>()).collect();
    let col_need: Vec<i64> = (0..cols).map(|c| col_targets[c] - (0..rows).map(|r| base[r][c]).sum::<i64>()).collect();
    if row_need.iter().chain(&col_need).any(|&d| d < 0) {
        return Err(Error::Numerical("table is not consistent with its integer margins".into()));
    }
    let total: i64 = row_need.iter().sum();
    if total != col_need.iter().sum::<i64>() {
        return Err(Error::Numerical("row and column margins disagree".into()));
    }

    // source -> row (cap need) -> cell (cap 1, cost 1 - 2 frac) -> col (cap need) -> sink
    let src = 0;
    let sink = 1 + rows + cols;
    let mut g = FlowGraph::new(sink + 1);
    for (r, &need) in row_need.iter().enumerate() {
        if need > 0 {
            g.add_edge(src, 1 + r, need, 0);
        }
    }
    let mut cell_edge = vec![vec![usize::MAX; cols]; rows];
    for r in 0..rows {
        if row_need[r] == 0 {
            continue;
        }
        for c in 0..cols {
            if col_need[c] > 0 && frac[r][c] > 0.0 {
                cell_edge[r][c] = g.add_edge(1 + r, 1 + rows + c, 1, frac_cost(frac[r][c]));
            }
        }
    }
    for (c, &need) in col_need.iter().enumerate() {
        if need > 0 {
            g.add_edge(1 + rows + c, sink, need, 0);
        }
    }
    let pushed = g.min_cost_flow(src, sink, total);
    if pushed != total {
        return Err(Error::Numerical(format!("controlled rounding infeasible: placed {pushed} of {total} units")));
    }
    for r in 0..rows {
        for c in 0..cols {
            let e = cell_edge[r][c];
            if e != usize::MAX && g.edges[e].cap == 0 {
                base[r][c] += 1;
            }
        }
    }
    Ok(base)
}

/// Cost of rounding a cell up, `1 - 2 frac`, in units of 1e-9. Integer costs
/// keep the shortest-path search exact, so no spurious negative cycles.
fn frac_cost(frac: f64) -> i64 {
    ((1.0 - 2.0 * frac) * 1e9).round() as i64
}

struct Edge {
    to: usize,
    cap: i64,
    cost: i64,
}

struct FlowGraph {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl FlowGraph {
    fn new(n: usize) -> Self {
        FlowGraph {
            edges: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: i64) -> usize {
        let id = self.edges.len();
        self.edges.push(Edge { to, cap, cost });
        self.adj[from].push(id);
        self.edges.push(Edge { to: from, cap: 0, cost: -cost });
        self.adj[to].push(id + 1);
        id
    }

    /// Successive shortest paths with Bellman-Ford (queue based), which
    /// tolerates the negative cell costs.
    fn min_cost_flow(&mut self, s: usize, t: usize, want: i64) -> i64 {
        let n = self.adj.len();
        let mut flow = 0;
        while flow < want {
            let mut dist = vec![i64::MAX; n];
            let mut prev = vec![usize::MAX; n];
            let mut in_queue = vec![false; n];
            let mut queue = VecDeque::from([s]);
            dist[s] = 0;
            while let Some(u) = queue.pop_front() {
                in_queue[u] = false;
                for &e in &self.adj[u] {
                    let edge = &self.edges[e];
                    if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] {
                        dist[edge.to] = dist[u] + edge.cost;
                        prev[edge.to] = e;
                        if !in_queue[edge.to] {
                            in_queue[edge.to] = true;
                            queue.push_back(edge.to);
                        }
                    }
                }
            }
            if dist[t] == i64::MAX {
                break;
            }
            let mut push = want - flow;
            let mut v = t;
            while v != s {
                let e = prev[v];
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let e = prev[v];
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                v = self.edges[e ^ 1].to;
            }
            flow += push;
        }
        flow
    }
}
