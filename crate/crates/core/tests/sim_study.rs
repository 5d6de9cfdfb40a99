use std::sync::Arc;

use privmap::car::{CarGraph, McmcConfig, ModelOptions};
use privmap::das::{run_topdown, DasConfig, NoiseModel, Variant};
use privmap::geo::{build_synthetic_geography, Layout};
use privmap::sim::study::{MEAN_SMR_BIAS, MEAN_SMR_MAPE};
use privmap::sim::{run_study, synthesize_population, DgpConfig, PopulationConfig, StudyConfig, StudyReport, StudySeries, SyntheticPopulation};
use privmap::standardize::{expected_counts, reference_rates, underestimation_fraction, ExpectedCounts, RateMode};

struct Fixture {
    pop: SyntheticPopulation,
    graph: Arc<CarGraph>,
    truth: ExpectedCounts,
    sources: Vec<ExpectedCounts>,
}

fn fixture(leaves: usize, branching: &[usize], variants: &[Variant], seed: u64) -> Fixture {
    let (h, adj) = build_synthetic_geography(leaves, branching, Layout::Grid, seed).unwrap();
    let pop = synthesize_population(&h, &adj, &PopulationConfig::default(), seed).unwrap();
    let rates = reference_rates(&pop.deaths, &pop.population, RateMode::Pooled).unwrap();
    let truth = expected_counts(&pop.population, &rates, "truth").unwrap();
    let mut sources = vec![truth.clone()];
    for &v in variants {
        let cfg = DasConfig::preset(v, h.depth(), NoiseModel::default(), seed).unwrap();
        let out = run_topdown(&pop.population, &h, &cfg).unwrap();
        sources.push(expected_counts(out.leaf(), &rates, v.name()).unwrap());
    }
    let graph = Arc::new(CarGraph::new(adj.reordered(&h.leaf_ids()).unwrap()).unwrap());
    Fixture {
        pop,
        graph,
        truth,
        sources,
    }
}

fn study(n_reps: usize, iterations: usize, seed: u64) -> StudyConfig {
    StudyConfig {
        dgp: DgpConfig {
            n_reps,
            ..DgpConfig::default()
        },
        mcmc: McmcConfig {
            iterations,
            burnin: iterations / 2,
            thin: 4,
            seed: 0,
        },
        model: ModelOptions::default(),
        seed,
    }
}

/// Small minority denominators under v19, over several mechanism seeds:
/// (below, above) counts for leaf cells with 1-5 people, and (below, total)
/// for unit expected counts at most 5.
fn small_minority_moves(seeds: u64) -> ((usize, usize), (usize, usize)) {
    let (h, adj) = build_synthetic_geography(300, &[2, 3, 5, 2, 5], Layout::Grid, 21).unwrap();
    let sp = synthesize_population(&h, &adj, &PopulationConfig::default(), 21).unwrap();
    let pop = &sp.population;
    let rates = reference_rates(&sp.deaths, pop, RateMode::Pooled).unwrap();
    let truth = expected_counts(pop, &rates, "truth").unwrap();
    let minority = pop.groups().index_of("Black").unwrap();
    let (mut cells, mut units) = ((0, 0), (0, 0));
    for seed in 0..seeds {
        let cfg = DasConfig::preset(Variant::V19, h.depth(), NoiseModel::default(), seed).unwrap();
        let prot = run_topdown(pop, &h, &cfg).unwrap().leaf().clone();
        for (i, (&t, &p)) in pop.cells().iter().zip(prot.cells()).enumerate() {
            if pop.stratum_parts(i % pop.n_strata()).1 == minority && t > 0.0 && t <= 5.0 {
                if p < t {
                    cells.0 += 1;
                } else if p > t {
                    cells.1 += 1;
                }
            }
        }
        let ec = expected_counts(&prot, &rates, "v19").unwrap();
        for u in 0..truth.units.len() {
            let t = truth.get(u, minority);
            if t > 0.0 && t <= 5.0 {
                units.1 += 1;
                if ec.get(u, minority) < t {
                    units.0 += 1;
                }
            }
        }
    }
    (cells, units)
}

#[test]
fn small_minority_denominators_pushed_down() {
    let ((down, up), (below, n)) = small_minority_moves(10);
    assert!(down > up, "{down} small cells moved down, {up} up");
    assert!(n >= 50, "{n} small expected counts");
    assert!(below as f64 / n as f64 > 0.5, "{below} of {n} small expected counts below truth");
}

#[test]
fn minority_expected_counts_underestimated_more_often() {
    let f = fixture(300, &[2, 3, 5, 2, 5], &[Variant::V19], 22);
    let under = underestimation_fraction(&f.sources[1], &f.truth).unwrap();
    let get = |g: &str| under.iter().find(|(n, _)| n == g).unwrap().1;
    assert!(get("Black") > get("NHW") + 5.0, "{under:?}");
}

#[test]
fn study_is_reproducible_and_round_trips() {
    let f = fixture(24, &[2, 3, 4], &[Variant::V22], 23);
    let cfg = study(3, 1000, 23);
    let a = run_study(&cfg, &f.truth, &f.sources, &f.pop.covariates, f.graph.clone(), Some(1)).unwrap();
    let b = run_study(&cfg, &f.truth, &f.sources, &f.pop.covariates, f.graph.clone(), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.replicates.len(), 3);
    assert!(a.replicates.iter().enumerate().all(|(i, r)| r.k == i));

    let dir = tempfile::tempdir().unwrap();
    let (rp, sp) = (dir.path().join("r.csv"), dir.path().join("s.csv"));
    std::fs::write(&rp, a.replicates_csv()).unwrap();
    std::fs::write(&sp, a.smr_series_csv()).unwrap();
    let back = StudySeries::read(&rp, &sp).unwrap();
    assert_eq!(back.sources, a.sources);
    assert_eq!(back.columns, a.columns);
    assert_eq!(back.replicates, a.replicates);
    let (ra, rb) = (
        StudyReport::from_series(&a, None).unwrap(),
        StudyReport::from_series(&back, None).unwrap(),
    );
    assert_eq!(ra.coef_bias_csv(), rb.coef_bias_csv());
    assert_eq!(ra.smr_mape_csv(), rb.smr_mape_csv());
}

#[test]
fn smr_error_pattern_across_sources() {
    let f = fixture(300, &[2, 3, 5, 2, 5], &[Variant::V19, Variant::V20, Variant::V22], 24);
    let series = run_study(&study(20, 4000, 24), &f.truth, &f.sources, &f.pop.covariates, f.graph.clone(), None).unwrap();
    let rep = StudyReport::from_series(&series, None).unwrap();
    let m = |s, g, k| rep.metric(s, g, k).unwrap();

    for g in ["NHW", "Black"] {
        assert!(m("truth", g, MEAN_SMR_BIAS).abs() <= 0.03, "truth {g} bias {}", m("truth", g, MEAN_SMR_BIAS));
    }
    assert!(m("truth", "Black", MEAN_SMR_MAPE) > m("truth", "NHW", MEAN_SMR_MAPE));

    let b = |s| m(s, "Black", MEAN_SMR_BIAS);
    assert!(b("v20") >= b("v22"), "v20 {} v22 {}", b("v20"), b("v22"));
    assert!(b("v19") >= b("v22"), "v19 {} v22 {}", b("v19"), b("v22"));
    assert!(b("v22") >= b("truth"), "v22 {} truth {}", b("v22"), b("truth"));
}
