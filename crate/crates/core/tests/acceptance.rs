//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use corgi2::cli::commands::uniformity_sweep;
use corgi2::cli::ExperimentConfig;
use corgi2::complexity::{predict_queries, reconcile};
use corgi2::objective::{make_clustered_dataset, ClusterLayout, HomogeneitySpec, QuadraticProblem};
use corgi2::rng::trial_seed;
use corgi2::shuffling::{build_stream, offline_corgi_shuffle, offline_passes, ShuffleConfig, Strategy};
use corgi2::statistics::{
    cross_covariance, improvement_threshold, improves, ks_two_sample, measure_h_d,
    monte_carlo_offline_variance, predict_h_prime, total_variance, variance_from_moments, variance_ratio,
    weighted_generalized_variance,
};
use corgi2::storage::{BlockStore, ExampleRecord};
use corgi2::trainer::{a_lower_bound, final_decade_slope, run_sgd, SgdConfig, TrainResult};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn index_store(num_blocks: usize, b: usize) -> BlockStore {
    let recs = (0..num_blocks * b).map(|i| ExampleRecord::new(i as u64, vec![i as f64])).collect();
    BlockStore::create(num_blocks, b, 1, recs).unwrap()
}

fn ladder() -> (BlockStore, QuadraticProblem) {
    let store = make_clustered_dataset(20, 10, 1, &HomogeneitySpec::ladder(), 0).unwrap();
    let problem = QuadraticProblem::from_store(&store).unwrap();
    (store, problem)
}

fn within(elapsed: Duration, limit: Duration) -> String {
    format!("{:.2}s of {:.0}s budget", elapsed.as_secs_f64(), limit.as_secs_f64())
}

fn table_exactness() -> Verdict {
    let start = Instant::now();
    let (m, b, n) = (1000usize, 10usize, 5usize);
    let store = index_store(m / b, b);
    let mut mismatches = Vec::new();
    let mut corgi2_totals = Vec::new();
    let strategies = [Strategy::FullShuffle, Strategy::ShuffleOnce, Strategy::CorgiPile, Strategy::Corgi2];
    for epochs in [1usize, 5, 10] {
        for s in strategies {
            let cfg = ShuffleConfig::new(n, 3);
            let stream = build_stream(store.fork(), s, &cfg, epochs).unwrap();
            let pred = predict_queries(s, m as u64, b as u64, epochs as u64, 1).unwrap();
            if let Err(e) = reconcile(&pred, &stream.ledger) {
                mismatches.push(format!("T={epochs} {e}"));
            }
            if s == Strategy::Corgi2 {
                let expected = (epochs as u64 + 2) * (m / b) as u64;
                corgi2_totals.push(stream.ledger.total());
                if stream.ledger.total() != expected {
                    mismatches
                        .push(format!("corgi2 T={epochs}: total {} != {expected}", stream.ledger.total()));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let fast = elapsed < Duration::from_secs(1);
    Verdict::new(
        mismatches.is_empty() && fast,
        format!(
            "12 ledgers reconciled, {} mismatches; corgi2 totals {:?} (expect 300/700/1200); {}",
            mismatches.len(),
            corgi2_totals,
            within(elapsed, Duration::from_secs(1))
        ) + &mismatches.iter().map(|m| format!("\n      {m}")).collect::<String>(),
    )
}

fn variance_bound_monte_carlo() -> Verdict {
    let start = Instant::now();
    let (store, problem) = ladder();
    // analytic oracle: centers 1..=20, each block constant
    let sigma2_exact = (20.0f64 * 20.0 - 1.0) / 12.0;
    let hd = measure_h_d(&store, &problem).unwrap();
    let oracle_ok = rel_err(hd.sigma2, sigma2_exact) < 1e-12 && rel_err(hd.h_d, 10.0) < 1e-12;
    let bound = predict_h_prime(10.0, 5, 10).unwrap() * sigma2_exact / 10.0;
    let report =
        monte_carlo_offline_variance(&store, &problem, &ShuffleConfig::new(5, 0), 1000, 2024).unwrap();
    let slack_ok = report.mc_mean <= bound * 1.05;
    let ci_ok = report.mc_mean <= bound * (1.0 + 3.0 * report.mc_halfwidth_95 / report.mc_mean);
    let below_pre = report.mc_mean < sigma2_exact;
    let elapsed = start.elapsed();
    let fast = elapsed < Duration::from_secs(30);
    Verdict::new(
        oracle_ok && slack_ok && ci_ok && below_pre && fast,
        format!(
            "sigma2 {} h_D {} (oracle 33.25, 10); mc mean {:.4} ± {:.4} over {} trials vs bound {:.4} (+5% = {:.4}), pre-shuffle {:.2}; {}",
            hd.sigma2,
            hd.h_d,
            report.mc_mean,
            report.mc_halfwidth_95,
            report.trials,
            bound,
            bound * 1.05,
            sigma2_exact,
            within(elapsed, Duration::from_secs(30))
        ),
    )
}

fn ratio_consistency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut flips_ok = true;
    let mut flip_failures = Vec::new();
    for _ in 0..1000 {
        let n = rng.random_range(2..=64usize);
        let b = rng.random_range(2..=64usize);
        let h_d = rng.random_range(1e-3..=b as f64);
        let h_prime = predict_h_prime(h_d, n, b).unwrap();
        worst = worst.max(rel_err(h_prime / h_d, variance_ratio(h_d, n, b).unwrap()));
        let t = improvement_threshold(n, b).unwrap();
        let at = improves(t, n, b).unwrap();
        let above = improves(t.next_up(), n, b).unwrap();
        let below = improves(t.next_down(), n, b).unwrap();
        if at || below || !above {
            flips_ok = false;
            flip_failures.push(format!("n={n} b={b}"));
        }
    }
    Verdict::new(
        worst <= 1e-12 && flips_ok,
        format!(
            "1000 grid points: max relative gap {worst:.2e} (tol 1e-12); threshold flip exact at every point: {flips_ok} {}",
            flip_failures.join(",")
        ),
    )
}

/// Final suboptimality of `x̄` per seed and the seed-averaged curve.
struct Sweep {
    finals: Vec<f64>,
    averaged: TrainResult,
}

impl Sweep {
    fn mean(&self) -> f64 {
        self.finals.iter().sum::<f64>() / self.finals.len() as f64
    }
}

const TRAIN_SEEDS: u64 = 50;
const TRAIN_EPOCHS: usize = 100;

/// Ladder problem, `n/N = 0.25`, decaying step schedule with the smallest
/// admissible offset for radius 20, started at the optimum so that only the
/// sampling-noise term remains.
fn train_sweep(strategy: Strategy, base: &ShuffleConfig) -> Sweep {
    let (store, problem) = ladder();
    let c = problem.constants(20.0).unwrap();
    let a = a_lower_bound(c.lipschitz, c.gradient_bound, c.hessian_lipschitz, 1.0).unwrap();
    let runs: Vec<TrainResult> = (0..TRAIN_SEEDS)
        .into_par_iter()
        .map(|k| {
            let cfg = ShuffleConfig { seed: trial_seed(17, k), ..base.clone() };
            let stream = build_stream(store.fork(), strategy, &cfg, TRAIN_EPOCHS).unwrap();
            let sgd = SgdConfig {
                n: base.n,
                b: store.block_size(),
                mu: 1.0,
                a,
                x0: problem.optimum().to_vec(),
                eta_override: None,
                radius: Some(20.0),
            };
            run_sgd(&stream, &problem, &sgd).unwrap()
        })
        .collect();
    Sweep {
        finals: runs.iter().map(|r| r.final_suboptimality_of_avg().unwrap()).collect(),
        averaged: TrainResult::average(&runs).unwrap(),
    }
}

struct TrainingRuns {
    full: Sweep,
    corgipile: Sweep,
    /// Offline phase sampling with replacement (the analyzed algorithm).
    corgi2_with: Sweep,
    /// Offline phase sampling without replacement.
    corgi2_without: Sweep,
    elapsed: Duration,
}

fn training_runs() -> TrainingRuns {
    let start = Instant::now();
    let cfg = ShuffleConfig::new(5, 0);
    TrainingRuns {
        full: train_sweep(Strategy::FullShuffle, &cfg),
        corgipile: train_sweep(Strategy::CorgiPile, &cfg),
        corgi2_with: train_sweep(Strategy::Corgi2, &cfg),
        corgi2_without: train_sweep(Strategy::Corgi2, &cfg.clone().without_replacement()),
        elapsed: start.elapsed(),
    }
}

fn convergence_ordering(runs: &TrainingRuns) -> Verdict {
    let pile = &runs.corgipile;
    let full_mean = runs.full.mean();
    let mut pass_any = false;
    let mut detail = format!(
        "{TRAIN_SEEDS} seeds, {TRAIN_EPOCHS} epochs; full {:.3e}, corgipile {:.3e}",
        full_mean,
        pile.mean()
    );
    for (name, c2) in [("with-repl", &runs.corgi2_with), ("without-repl", &runs.corgi2_without)] {
        let wins = c2.finals.iter().zip(&pile.finals).filter(|(a, b)| a <= b).count();
        let frac = wins as f64 / c2.finals.len() as f64;
        let mean_ok = c2.mean() <= pile.mean();
        let full_ok = c2.mean() <= 2.0 * full_mean;
        let seed_ok = frac >= 0.9;
        pass_any |= mean_ok && full_ok && seed_ok;
        detail += &format!(
            "\n      corgi2 {name}: mean {:.3e} (<= corgipile: {mean_ok}), {:.2}x full (<= 2: {full_ok}), per-seed wins {wins}/{} (>= 90%: {seed_ok})",
            c2.mean(),
            c2.mean() / full_mean,
            c2.finals.len()
        );
    }
    let fast = runs.elapsed < Duration::from_secs(120);
    detail += &format!("\n      {}", within(runs.elapsed, Duration::from_secs(120)));
    Verdict::new(pass_any && fast, detail)
}

fn rate_slope(runs: &TrainingRuns) -> Verdict {
    let mut pass_any = false;
    let mut detail = format!("{TRAIN_SEEDS} seeds aggregated, target [-1.4, -0.6]");
    for (name, sweep) in [
        ("corgi2 with-repl", &runs.corgi2_with),
        ("corgi2 without-repl", &runs.corgi2_without),
        ("corgipile", &runs.corgipile),
        ("full shuffle", &runs.full),
    ] {
        let slope = final_decade_slope(&sweep.averaged.rounds).unwrap();
        let ok = (-1.4..=-0.6).contains(&slope);
        if name.starts_with("corgi2") {
            pass_any |= ok;
        }
        detail += &format!("\n      {name}: slope {slope:.3}{}", if ok { " (in range)" } else { "" });
    }
    Verdict::new(pass_any, detail)
}

fn uniformity() -> Verdict {
    let config = ExperimentConfig::parse(
        "version = 1\nseed = 11\ntrials = 50\n[problem]\nnum_blocks = 100\nblock_size = 10\n\
         [shuffle]\nn = 5\nreplacement = \"without\"\n",
    )
    .unwrap();
    let store = index_store(100, 10);
    let seeds: Vec<u64> = (0..50).map(|k| trial_seed(config.seed, k)).collect();
    let mut rho = BTreeMap::new();
    for s in [Strategy::Sequential, Strategy::CorgiPile, Strategy::Corgi2, Strategy::FullShuffle] {
        rho.insert(s, uniformity_sweep(&store, s, &config, &seeds).unwrap().mean_abs_spearman);
    }
    let c2 = rho[&Strategy::Corgi2];
    let pile = rho[&Strategy::CorgiPile];
    let full = rho[&Strategy::FullShuffle];
    Verdict::new(
        c2 < pile && full < 0.05,
        format!(
            "m=1000, n/N=0.05, 50 seeds: mean |rho| corgi2 {c2:.4} < corgipile {pile:.4}; full shuffle {full:.4} < 0.05; sequential {:.1}",
            rho[&Strategy::Sequential]
        ),
    )
}

fn variance_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 4];
    for _ in 0..200 {
        let dim = rng.random_range(1..=4usize);
        let blocks = rng.random_range(1..=6usize);
        let groups: Vec<Vec<Vec<f64>>> = (0..blocks)
            .map(|_| {
                let size = rng.random_range(1..=5usize);
                (0..size).map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect()).collect()
            })
            .collect();
        // exact enumeration of (block, member) outcomes
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut w = Vec::new();
        for g in &groups {
            for x in g {
                xs.push(x.clone());
                ys.push(x.iter().map(|v| v.sin() * 3.0 + v * 0.5).collect::<Vec<f64>>());
                w.push(1.0 / (blocks as f64 * g.len() as f64));
            }
        }
        let v = weighted_generalized_variance(&xs, &w).unwrap();
        worst[0] = worst[0].max(rel_err(v, variance_from_moments(&xs, &w).unwrap()));
        let a = rng.random_range(-5.0..5.0);
        let scaled: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| a * v).collect()).collect();
        worst[1] = worst[1].max(rel_err(weighted_generalized_variance(&scaled, &w).unwrap(), a * a * v));
        let sum: Vec<Vec<f64>> =
            xs.iter().zip(&ys).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
        let lhs = weighted_generalized_variance(&sum, &w).unwrap();
        let rhs = v
            + weighted_generalized_variance(&ys, &w).unwrap()
            + cross_covariance(&xs, &ys, &w).unwrap()
            + cross_covariance(&ys, &xs, &w).unwrap();
        worst[2] = worst[2].max(rel_err(lhs, rhs));
        let tv = total_variance(&groups).unwrap();
        worst[3] = worst[3].max(rel_err(v, tv.total)).max(rel_err(tv.total, tv.between + tv.within));
    }
    Verdict::new(
        worst.iter().all(|&e| e <= 1e-9),
        format!(
            "200 enumerations: max rel err moment form {:.1e}, scaling {:.1e}, cross-covariance {:.1e}, total variance {:.1e} (tol 1e-9)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn iteration_distribution() -> Verdict {
    let spec = HomogeneitySpec { cluster_spread: 1.0, within_spread: 0.5, layout: ClusterLayout::Gaussian };
    let store = make_clustered_dataset(20, 10, 1, &spec, 8).unwrap();
    let n = 5;
    let block_mean = |s: &BlockStore, id: usize| -> f64 {
        let recs = &s.blocks().nth(id).unwrap().records;
        recs.iter().map(|r| r.payload[0]).sum::<f64>() / recs.len() as f64
    };
    let pairs: Vec<(f64, f64)> = (0..1000u64)
        .into_par_iter()
        .map(|t| {
            let out = offline_corgi_shuffle(store.fork(), &ShuffleConfig::new(n, trial_seed(31, t))).unwrap();
            (block_mean(&out, 0), block_mean(&out, n))
        })
        .collect();
    let (first, second): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (d, p) = ks_two_sample(&first, &second).unwrap();
    Verdict::new(
        p >= 0.01,
        format!("1000 trials, first block of iteration 1 vs iteration 2: KS D = {d:.4}, p = {p:.3} (reject below 0.01)"),
    )
}

fn without_replacement_variant() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut multiset_ok = 0;
    for k in 0..100u64 {
        let num_blocks = rng.random_range(2..=40usize);
        let b = rng.random_range(1..=12usize);
        let n = rng.random_range(1..=num_blocks);
        let mut cfg = ShuffleConfig::new(n, k).passes(rng.random_range(1..=3usize));
        cfg = if rng.random_bool(0.5) { cfg.in_place() } else { cfg.without_replacement() };
        let out = offline_passes(index_store(num_blocks, b), &cfg).unwrap();
        let mut origins: Vec<u64> = out.records().map(|r| r.index).collect();
        origins.sort_unstable();
        if origins == (0..(num_blocks * b) as u64).collect::<Vec<_>>() {
            multiset_ok += 1;
        }
    }

    let mut variance_ok = true;
    let mut detail = format!("multiset preserved on {multiset_ok}/100 configurations");
    let gaussian =
        HomogeneitySpec { cluster_spread: 2.0, within_spread: 1.0, layout: ClusterLayout::Gaussian };
    let problems = [("ladder", HomogeneitySpec::ladder()), ("gaussian", gaussian)];
    for (name, spec) in problems {
        let store = make_clustered_dataset(20, 10, 1, &spec, 4).unwrap();
        let problem = QuadraticProblem::from_store(&store).unwrap();
        let with =
            monte_carlo_offline_variance(&store, &problem, &ShuffleConfig::new(5, 0), 1000, 77).unwrap();
        for (variant, cfg) in [
            ("without", ShuffleConfig::new(5, 0).without_replacement()),
            ("in-place", ShuffleConfig::new(5, 0).in_place()),
        ] {
            let r = monte_carlo_offline_variance(&store, &problem, &cfg, 1000, 77).unwrap();
            let ok = r.mc_mean <= with.mc_mean * 1.05;
            variance_ok &= ok;
            detail += &format!(
                "\n      {name} {variant}: mc mean {:.4} vs with-replacement {:.4} (limit {:.4})",
                r.mc_mean,
                with.mc_mean,
                with.mc_mean * 1.05
            );
        }
    }
    Verdict::new(multiset_ok == 100 && variance_ok, detail)
}

fn main() -> ExitCode {
    let runs = training_runs();
    let results = [
        ("closed-form query counts", table_exactness()),
        ("offline variance bound", variance_bound_monte_carlo()),
        ("h' ratio / improvement threshold", ratio_consistency()),
        ("convergence ordering", convergence_ordering(&runs)),
        ("rate slope", rate_slope(&runs)),
        ("shuffle uniformity", uniformity()),
        ("generalized variance properties", variance_properties()),
        ("iteration distribution (KS)", iteration_distribution()),
        ("without-replacement / in-place", without_replacement_variant()),
    ];
    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        println!("criterion {} [{}] {name}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
