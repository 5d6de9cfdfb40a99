//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use privmap::car::{fit, mrr_summary, CarGraph, CarPrior, McmcConfig, ModelOptions, ModelSpec};
use privmap::das::noise::discrete_laplace;
use privmap::das::{check_consistency, controlled_round, kkt_residual, project_children, run_topdown, DasConfig, NoiseModel, Variant};
use privmap::geo::{build_synthetic_geography, Layout};
use privmap::pipeline::{Pipeline, RunConfig, COEF_BIAS, FRACTIONS, REPLICATES, SMR_BIAS, SMR_MAPE, SMR_SERIES};
use privmap::rng;
use privmap::sim::study::{MEAN_SMR_BIAS, UPWARD_BIAS_PCT};
use privmap::sim::{bias, mape, synthesize_population, PopulationConfig, StudyReport, StudySeries};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let mut r = rng::stream(101, &["acceptance", "noise"]);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for eps in [0.5, 1.0, 4.0] {
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| discrete_laplace(eps, &mut r) as f64).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let q = (-eps as f64).exp();
        let target = 2.0 * q / (1.0 - q).powi(2);
        let rel = (v / target - 1.0).abs();
        worst = worst.max(rel);
        parts.push(format!("eps={eps}: var {v:.4} vs {target:.4}"));
    }
    outcome(worst <= 0.05, format!("{}; worst rel err {:.4}", parts.join(", "), worst))
}

/// Projection of `v` onto the scaled simplex by a grid over the multiplier
/// in `x = max(v - t, 0)`.
fn projection_by_grid(parent: f64, v: &[f64], step: f64) -> Vec<f64> {
    let lo = v.iter().fold(f64::INFINITY, |m, &x| m.min(x)) - parent - 1.0;
    let hi = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut best = (f64::INFINITY, lo);
    let mut t = lo;
    while t <= hi + step {
        let gap = (v.iter().map(|&x| (x - t).max(0.0)).sum::<f64>() - parent).abs();
        if gap < best.0 {
            best = (gap, t);
        }
        t += step;
    }
    v.iter().map(|&x| (x - best.1).max(0.0)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Minimum squared distance from `v` over a primal grid on
/// `{x >= 0, sum x = parent}` with `m` steps per unit of `parent`.
fn primal_grid_min(parent: f64, v: &[f64], m: usize) -> f64 {
    fn go(parent: f64, v: &[f64], m: usize, left: usize, x: &mut Vec<f64>, best: &mut f64) {
        let h = parent / m as f64;
        if x.len() + 1 == v.len() {
            x.push(left as f64 * h);
            *best = best.min(sq_dist(x, v));
            x.pop();
            return;
        }
        for k in 0..=left {
            x.push(k as f64 * h);
            go(parent, v, m, left - k, x, best);
            x.pop();
        }
    }
    let mut best = f64::INFINITY;
    go(parent, v, m, m, &mut Vec::new(), &mut best);
    best
}

fn criterion_2() -> Outcome {
    let mut r = rng::stream(102, &["acceptance", "projection"]);
    let step = 1e-3;
    let (mut worst_grid, mut worst_kkt, mut primal_fail, mut round_fail) = (0.0f64, 0.0f64, 0, 0);
    for i in 0..1000 {
        let n = r.random_range(1..=6usize);
        let parent = r.random_range(0..40u32) as f64;
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..30.0)).collect();
        let x = project_children(parent, &v);
        let oracle = projection_by_grid(parent, &v, step);
        let dev = x.iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst_grid = worst_grid.max(dev);
        worst_kkt = worst_kkt.max(kkt_residual(parent, &v, &x));
        // Exhaustive primal grid on small instances: nothing on the grid
        // beats the projection.
        if n <= 3 && parent > 0.0 && i % 4 == 0 {
            let m = 200;
            if primal_grid_min(parent, &v, m) < sq_dist(&x, &v) - 1e-9 {
                primal_fail += 1;
            }
        }
        let target = x.iter().sum::<f64>().round() as i64;
        let rounded = controlled_round(&x, target).expect("feasible target");
        let exact = rounded.iter().sum::<i64>() == target;
        let adjacent = rounded
            .iter()
            .zip(&x)
            .all(|(&k, &xi)| k as f64 == xi.floor() || k as f64 == xi.ceil());
        if !(exact && adjacent) {
            round_fail += 1;
        }
    }
    let pass = worst_grid <= step && worst_kkt <= 1e-9 && primal_fail == 0 && round_fail == 0;
    outcome(
        pass,
        format!(
            "grid dev {worst_grid:.2e} (step {step}), KKT {worst_kkt:.2e}, primal-grid violations {primal_fail}, rounding failures {round_fail}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let (h, adj) = build_synthetic_geography(300, &[10, 30], Layout::Grid, 103).unwrap();
    let pop = synthesize_population(&h, &adj, &PopulationConfig::default(), 103).unwrap();
    let total = pop.population.total();
    let mut failures = Vec::new();
    for v in [Variant::V19, Variant::V20, Variant::V22] {
        for seed in 0..20u64 {
            let cfg = DasConfig::preset(v, h.depth(), NoiseModel::default(), seed).unwrap();
            let out = run_topdown(&pop.population, &h, &cfg).unwrap();
            let root = out.levels[0].total();
            if let Err(e) = check_consistency(&out.levels, &h, total) {
                failures.push(format!("{} seed {seed}: {e}", v.name()));
            } else if root != total {
                failures.push(format!("{} seed {seed}: root {root} vs {total}", v.name()));
            }
        }
    }
    outcome(
        failures.is_empty() && h.depth() == 3,
        if failures.is_empty() {
            format!("depth {}, 60 runs consistent", h.depth())
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_4() -> Outcome {
    let (h, adj) = build_synthetic_geography(9, &[9], Layout::Grid, 0).unwrap();
    let adj = adj.reordered(&h.leaf_ids()).unwrap();
    let n = adj.len();
    // Dense oracle built directly from the edge list.
    let mut q = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        q[(i, i)] = adj.row_sum(i);
        for &(k, w) in adj.neighbors(i) {
            q[(i, k)] -= 0.2 * w;
        }
    }
    let sigma = q.try_inverse().unwrap();
    let graph = CarGraph::new(adj).unwrap();
    let prior = CarPrior::new(&graph, 0.2, 1.0).unwrap();
    let mut r = rng::stream(104, &["acceptance", "car"]);
    let draws = 100_000;
    let mut sum = DVector::<f64>::zeros(n);
    let mut cross = DMatrix::<f64>::zeros(n, n);
    for _ in 0..draws {
        let x = DVector::from_vec(prior.sample(&mut r));
        sum += &x;
        cross += &x * x.transpose();
    }
    let m = sum / draws as f64;
    let s = (cross - (&m * m.transpose()) * draws as f64) / (draws - 1) as f64;
    // Entrywise, relative to the scale of the pair.
    let mut worst = 0.0f64;
    for i in 0..n {
        for k in 0..n {
            let scale = (sigma[(i, i)] * sigma[(k, k)]).sqrt();
            worst = worst.max((s[(i, k)] - sigma[(i, k)]).abs() / scale);
        }
    }
    let is_grid = (0..n).map(|i| graph.adjacency().neighbors(i).len()).sum::<usize>() == 24;
    outcome(worst <= 0.03 && is_grid, format!("max |S - Sigma| / sqrt(Sii Skk) = {worst:.4}"))
}

fn irls(x: &[Vec<f64>], y: &[f64], offset: &[f64]) -> Vec<f64> {
    let (n, p) = (x.len(), x[0].len());
    let xm = DMatrix::from_fn(n, p, |i, k| x[i][k]);
    let mut beta = DVector::<f64>::zeros(p);
    beta[0] = (y.iter().sum::<f64>() / offset.iter().map(|o| o.exp()).sum::<f64>()).ln();
    for _ in 0..100 {
        let eta = &xm * &beta;
        let mu: Vec<f64> = (0..n).map(|i| (eta[i] + offset[i]).exp()).collect();
        let z = DVector::from_fn(n, |i, _| eta[i] + (y[i] - mu[i]) / mu[i]);
        let w = DMatrix::from_diagonal(&DVector::from_vec(mu));
        let xtw = xm.transpose() * w;
        let next = (&xtw * &xm).lu().solve(&(&xtw * z)).unwrap();
        let change = (&next - &beta).amax();
        beta = next;
        if change < 1e-12 {
            break;
        }
    }
    beta.iter().copied().collect()
}

fn criterion_5() -> Outcome {
    let mut r = rng::stream(105, &["acceptance", "glm"]);
    let beta = [0.0, 0.4, 0.01];
    let (mut rows, mut expected, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..500 {
        let black = (i % 2) as f64;
        let pov: f64 = r.random_range(-15.0..15.0);
        let p: f64 = r.random_range(2.0..30.0);
        let lam = p * (beta[0] + beta[1] * black + beta[2] * pov).exp();
        y.push(Poisson::new(lam).unwrap().sample(&mut r) as u64);
        rows.push(vec![1.0, black, pov]);
        expected.push(p);
    }
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let off: Vec<f64> = expected.iter().map(|p: &f64| p.ln()).collect();
    let mle = irls(&rows, &yf, &off);
    let opts = ModelOptions {
        spatial: false,
        unstructured: false,
        ..ModelOptions::default()
    };
    let cols = vec!["intercept".into(), "group:Black".into(), "prop_pov".into()];
    let spec = ModelSpec::from_rows(cols, rows, expected, opts).unwrap();
    let mcmc = McmcConfig {
        iterations: 8000,
        burnin: 3000,
        thin: 5,
        seed: 105,
    };
    let s = mrr_summary(&fit(&y, &spec, &mcmc).unwrap()).unwrap();
    let z: Vec<f64> = (0..3).map(|k| (s.coefficients[k].mean - mle[k]).abs() / s.coefficients[k].sd).collect();
    outcome(z.iter().all(|v| *v <= 3.0), format!("|posterior mean - MLE| / sd = {z:.3?}"))
}

fn study_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.geo.leaves = 300;
    c.geo.branching = vec![2, 3, 5, 2, 5];
    c.sim.n_reps = 50;
    c.sim.sources = ["truth", "v19", "v20", "v22"].map(String::from).to_vec();
    c.model.mcmc.iterations = 4000;
    c.model.mcmc.burnin = 2000;
    c.model.mcmc.thin = 4;
    c
}

fn report_of(out: &Path) -> StudyReport {
    let series = StudySeries::read(&out.join(REPLICATES), &out.join(SMR_SERIES)).unwrap();
    StudyReport::from_series(&series, None).unwrap()
}

fn criterion_6(rep: &StudyReport) -> Outcome {
    let b1 = rep.coef("truth", "group:Black").unwrap();
    let b2 = rep.coef("truth", "prop_pov").unwrap();
    outcome(
        b1.mean_bias.abs() <= 0.02 && b2.mean_bias.abs() <= 0.005,
        format!(
            "truth: bias(b1) {:+.4}, bias(b2) {:+.5}, {} reps, {} non-converged",
            b1.mean_bias, b2.mean_bias, b1.n_reps, b1.n_nonconverged
        ),
    )
}

fn criterion_7(rep: &StudyReport) -> Outcome {
    let b = |s| rep.coef(s, "group:Black").unwrap().mean_bias;
    let (v19, v20, v22) = (b("v19"), b("v20"), b("v22"));
    outcome(
        v19 > 0.0 && v19 > v22 && (-0.02..=0.03).contains(&v22),
        format!("bias(b1): v19 {v19:+.4}, v20 {v20:+.4}, v22 {v22:+.4}"),
    )
}

fn criterion_8(rep: &StudyReport) -> Outcome {
    let m = |s, g, k| rep.metric(s, g, k).unwrap();
    let gap = m("v19", "Black", MEAN_SMR_BIAS) - m("v19", "NHW", MEAN_SMR_BIAS);
    let up = m("v19", "Black", UPWARD_BIAS_PCT) - m("v19", "NHW", UPWARD_BIAS_PCT);
    let v22 = m("v22", "Black", MEAN_SMR_BIAS);
    outcome(
        gap >= 0.05 && up >= 10.0 && v22 <= 0.04,
        format!("v19 SMR bias gap {gap:+.4}, upward gap {up:+.1} pp, v22 minority bias {v22:+.4}"),
    )
}

fn criterion_9(out: &Path) -> Outcome {
    let start = Instant::now();
    let rep = report_of(out);
    // Direct recomputation from the stored series text.
    let text = std::fs::read_to_string(out.join(SMR_SERIES)).unwrap();
    let mut acc: BTreeMap<(String, String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[4] == "NA" || f[5] == "NA" {
            continue;
        }
        let e = acc.entry((f[1].into(), f[2].into(), f[3].into())).or_default();
        e.0.push(f[4].parse().unwrap());
        e.1.push(f[5].parse().unwrap());
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for c in &rep.cells {
        let Some((est, tru)) = acc.get(&(c.source.clone(), c.unit.clone(), c.group.clone())) else {
            if c.bias.is_some() {
                return outcome(false, format!("{} {} {} missing from the series", c.source, c.unit, c.group));
            }
            continue;
        };
        let n = est.len() as f64;
        let mut b = 0.0;
        let mut a = 0.0;
        for i in 0..est.len() {
            b += est[i] - tru[i];
            a += ((est[i] - tru[i]) / tru[i]).abs();
        }
        let (b, a) = (b / n, a / n);
        worst = worst.max((c.bias.unwrap() - b).abs()).max((c.mape.unwrap() - a).abs());
        worst = worst.max((bias(est, tru).unwrap() - b).abs()).max((mape(est, tru).unwrap() - a).abs());
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && checked > 0,
        format!("{checked} cells, max deviation {worst:.1e}, {secs:.2} s"),
    )
}

fn report_bytes(out: &Path) -> Vec<Vec<u8>> {
    [COEF_BIAS, SMR_BIAS, SMR_MAPE, FRACTIONS]
        .iter()
        .map(|r| std::fs::read(out.join(r)).unwrap())
        .collect()
}

fn main() {
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };
    for (k, f) in [
        (1, &criterion_1 as &dyn Fn() -> Outcome),
        (2, &criterion_2),
        (3, &criterion_3),
        (4, &criterion_4),
        (5, &criterion_5),
    ] {
        let (o, s) = timed(f);
        results.push((k, o, s));
    }

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("run-a"), dir.path().join("run-b"));
    let t = Instant::now();
    Pipeline::new(study_config(), &a, None).unwrap().run_all().unwrap();
    let study_secs = t.elapsed().as_secs_f64();
    let rep = report_of(&a);
    results.push((6, criterion_6(&rep), study_secs));
    results.push((7, criterion_7(&rep), study_secs));
    results.push((8, criterion_8(&rep), study_secs));
    let (o, s) = timed(&|| criterion_9(&a));
    results.push((9, o, s));

    let t = Instant::now();
    Pipeline::new(study_config(), &b, None).unwrap().run_all().unwrap();
    let rerun_secs = t.elapsed().as_secs_f64();
    let same = report_bytes(&a) == report_bytes(&b);
    results.push((
        10,
        outcome(same && rerun_secs < 2.0 * study_secs, format!("report bytes identical: {same}")),
        rerun_secs,
    ));

    let mut failed = 0;
    for (k, o, secs) in &results {
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {k:>2}: {} ({secs:.1} s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
