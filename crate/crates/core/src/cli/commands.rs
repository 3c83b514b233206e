use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{ConfigError, ConfigHash, ExperimentConfig};
use crate::complexity::{predict_corgi2_in_place, predict_queries, reconcile, ComplexityError};
use crate::objective::{make_clustered_dataset, ObjectiveError, QuadraticProblem};
use crate::rng::trial_seed;
use crate::shuffling::{build_stream, offline_passes, shuffle_once_offline, ShuffleError, Strategy};
use crate::statistics::{
    measure_h_d, monte_carlo_offline_variance, uniformity_metrics, StatsError, UniformityReport,
};
use crate::storage::{serialize_store, BlockStore, StorageError};
use crate::trainer::{a_lower_bound, rate_report, run_sgd, RateParams, SgdConfig, TrainError, TrainResult};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("output directory {0} already exists (pass --force to replace it)")]
    OutputExists(PathBuf),
    #[error("{0}")]
    Contract(String),
    #[error("reconciliation failed: {0}")]
    Reconciliation(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::OutputExists(_) => 2,
            CliError::Contract(_) | CliError::Reconciliation(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<StorageError> for CliError {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Contract(other.to_string()),
        }
    }
}

impl From<ShuffleError> for CliError {
    fn from(e: ShuffleError) -> Self {
        match e {
            ShuffleError::Storage(s) => s.into(),
            other => CliError::Contract(other.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        CliError::Contract(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Contract(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Contract(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// A resolved experiment: the config after command-line overrides, its hash,
/// and the directory results go to.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub hash: ConfigHash,
    pub out: PathBuf,
}

impl Run {
    pub fn new(config: ExperimentConfig, out: PathBuf) -> Self {
        let hash = config.hash();
        Self { config, hash, out }
    }

    fn dataset(&self) -> CliResult<(BlockStore, QuadraticProblem)> {
        let p = &self.config.problem;
        let store = make_clustered_dataset(
            p.num_blocks,
            p.block_size,
            p.dim,
            &self.config.homogeneity(),
            self.config.seed,
        )?;
        let problem = QuadraticProblem::from_store(&store)?;
        Ok((store, problem))
    }

    fn trial_seeds(&self) -> Vec<u64> {
        (0..self.config.trials as u64).map(|k| trial_seed(self.config.seed, k)).collect()
    }

    fn writer(&self, name: &str) -> CliResult<csv::Writer<fs::File>> {
        Ok(csv::Writer::from_path(self.out.join(name))?)
    }

    fn summary(&self, command: &str, body: &str) -> CliResult<()> {
        let text = format!(
            "command: {command}\nconfig_hash: {}\nseed: {}\ntrials: {}\n\n{body}",
            self.hash, self.config.seed, self.config.trials
        );
        fs::write(self.out.join("summary.txt"), text)?;
        Ok(())
    }
}

/// Creates `dir`, refusing to touch an existing one unless `force` is set,
/// in which case it is removed first.
pub fn prepare_output_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !force {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
        if dir.is_dir() {
            fs::remove_dir_all(dir)?;
        } else {
            fs::remove_file(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

pub fn cmd_gen(run: &Run) -> CliResult<()> {
    let (store, problem) = run.dataset()?;
    let hd = measure_h_d(&store, &problem)?;
    serialize_store(&store, &run.out.join("store"))?;
    let mut w = run.writer("dataset.csv")?;
    w.write_record([
        "config_hash",
        "num_blocks",
        "block_size",
        "dim",
        "num_records",
        "sigma2",
        "blockwise_variance",
        "h_d",
    ])?;
    w.write_record([
        run.hash.to_string(),
        store.num_blocks().to_string(),
        store.block_size().to_string(),
        store.dim().to_string(),
        store.num_records().to_string(),
        fmt_f(hd.sigma2),
        fmt_f(hd.blockwise_variance),
        fmt_f(hd.h_d),
    ])?;
    w.flush()?;
    run.summary(
        "gen",
        &format!(
            "records: {} in {} blocks of {}\nsigma2: {}\nblockwise variance: {}\nh_D: {}\n",
            store.num_records(),
            store.num_blocks(),
            store.block_size(),
            hd.sigma2,
            hd.blockwise_variance,
            hd.h_d
        ),
    )
}

/// Runs the offline phase of the configured strategy (nothing for purely
/// online strategies) and writes the resulting store.
pub fn cmd_shuffle(run: &Run) -> CliResult<()> {
    let (store, problem) = run.dataset()?;
    let strategy = run.config.strategy()?;
    let before = measure_h_d(&store, &problem)?;
    let shuffled = match strategy {
        Strategy::Corgi2 => offline_passes(store, &run.config.shuffle_config(run.config.seed)?)?,
        Strategy::ShuffleOnce => shuffle_once_offline(&store, run.config.seed)?,
        _ => store,
    };
    let after = measure_h_d(&shuffled, &problem)?;
    let ledger = shuffled.ledger().snapshot();
    serialize_store(&shuffled, &run.out.join("store"))?;

    let mut w = run.writer("ledger.csv")?;
    w.write_record([
        "config_hash",
        "strategy",
        "offline_reads",
        "offline_writes",
        "online_reads",
        "online_writes",
        "blockwise_variance_before",
        "blockwise_variance_after",
        "h_d_before",
        "h_d_after",
    ])?;
    w.write_record([
        run.hash.to_string(),
        strategy.to_string(),
        ledger.offline_reads.to_string(),
        ledger.offline_writes.to_string(),
        ledger.online_reads.to_string(),
        ledger.online_writes.to_string(),
        fmt_f(before.blockwise_variance),
        fmt_f(after.blockwise_variance),
        fmt_f(before.h_d),
        fmt_f(after.h_d),
    ])?;
    w.flush()?;
    run.summary(
        "shuffle",
        &format!(
            "strategy: {strategy}\noffline queries: {} reads, {} writes\nh_D: {} -> {}\n",
            ledger.offline_reads, ledger.offline_writes, before.h_d, after.h_d
        ),
    )
}

/// Trains every configured strategy on `trials` matched seeds, writes the
/// per-round curves and, when at least two strategies ran, the rate report.
pub fn cmd_train(run: &Run) -> CliResult<()> {
    let cfg = &run.config;
    let (store, problem) = run.dataset()?;
    let strategies = cfg.train_strategies()?;
    let hd = measure_h_d(&store, &problem)?;
    let a = match cfg.offset_value()? {
        Some(a) => a,
        None => {
            let c = problem.constants(cfg.train.radius)?;
            a_lower_bound(c.lipschitz, c.gradient_bound, c.hessian_lipschitz, cfg.train.mu)?
        }
    };
    let x0 = cfg.train.x0.clone().unwrap_or_else(|| vec![0.0; problem.dim()]);
    let seeds = run.trial_seeds();
    let jobs: Vec<(Strategy, usize, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().enumerate().map(move |(k, &seed)| (s, k, seed)))
        .collect();

    let results: Vec<TrainResult> = jobs
        .par_iter()
        .map(|&(strategy, _, seed)| -> CliResult<TrainResult> {
            let shuffle = cfg.shuffle_config(seed)?;
            let b = match strategy {
                Strategy::Corgi2 => shuffle.offline_block_size.unwrap_or(store.block_size()),
                _ => store.block_size(),
            };
            let stream = build_stream(store.fork(), strategy, &shuffle, cfg.train.epochs)?;
            let sgd = SgdConfig {
                n: shuffle.online_buffer(),
                b,
                mu: cfg.train.mu,
                a,
                x0: x0.clone(),
                eta_override: cfg.train.eta,
                radius: Some(cfg.train.radius),
            };
            Ok(run_sgd(&stream, &problem, &sgd)?)
        })
        .collect::<CliResult<_>>()?;

    let mut w = run.writer("rounds.csv")?;
    w.write_record([
        "run_id",
        "strategy",
        "seed",
        "round",
        "T_seen",
        "eta",
        "suboptimality",
        "suboptimality_of_weighted_avg",
        "config_hash",
    ])?;
    for (&(strategy, k, seed), result) in jobs.iter().zip(&results) {
        let run_id = format!("{strategy}-{k}");
        for r in &result.rounds {
            w.write_record([
                run_id.clone(),
                strategy.to_string(),
                seed.to_string(),
                r.round.to_string(),
                r.t_seen.to_string(),
                fmt_f(r.eta),
                fmt_f(r.suboptimality),
                fmt_f(r.suboptimality_of_avg),
                run.hash.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut averaged = BTreeMap::new();
    let mut flagged = 0usize;
    for (i, &strategy) in strategies.iter().enumerate() {
        let runs = &results[i * seeds.len()..(i + 1) * seeds.len()];
        flagged += runs.iter().filter(|r| r.left_ball).count();
        averaged.insert(strategy, TrainResult::average(runs)?);
    }

    let mut body = format!("schedule offset a: {a}\nh_D: {}\nsigma2: {}\n", hd.h_d, hd.sigma2);
    let _ = writeln!(body, "runs leaving the radius-{} ball: {flagged}", cfg.train.radius);
    for (s, r) in &averaged {
        let _ = writeln!(
            body,
            "{s}: mean final suboptimality of weighted average {}",
            r.final_suboptimality_of_avg().unwrap_or(f64::NAN)
        );
    }

    let params = RateParams {
        num_blocks: store.num_blocks(),
        n: cfg.shuffle_config(cfg.seed)?.online_buffer(),
        b: store.block_size(),
        h_d: hd.h_d,
        sigma2: hd.sigma2,
    };
    match rate_report(&averaged, &params) {
        Ok(report) => {
            let mut w = run.writer("rate.csv")?;
            w.write_record([
                "config_hash",
                "strategy",
                "final_T",
                "mean_final_suboptimality_of_weighted_avg",
                "loglog_slope",
                "alpha",
                "beta",
                "gamma",
                "h_d",
                "h_prime",
                "leading_term",
            ])?;
            for (s, r) in &report.strategies {
                let leading = match s {
                    Strategy::Corgi2 => fmt_f(report.leading_term_corgi2),
                    Strategy::CorgiPile => fmt_f(report.leading_term_corgipile),
                    _ => String::new(),
                };
                w.write_record([
                    run.hash.to_string(),
                    s.to_string(),
                    r.final_t.to_string(),
                    fmt_f(r.final_suboptimality_of_avg),
                    fmt_f(r.slope),
                    fmt_f(report.alpha),
                    fmt_f(report.beta),
                    fmt_f(report.gamma),
                    fmt_f(hd.h_d),
                    fmt_f(report.h_prime),
                    leading,
                ])?;
            }
            w.flush()?;
            let _ = writeln!(
                body,
                "alpha {} beta {} gamma {}\nleading terms at final T: corgipile {} corgi2 {}",
                report.alpha,
                report.beta,
                report.gamma,
                report.leading_term_corgipile,
                report.leading_term_corgi2
            );
            for (s, r) in &report.strategies {
                let _ = writeln!(body, "{s}: log-log slope over final decade {}", r.slope);
            }
        }
        Err(e) => {
            let _ = writeln!(body, "rate report skipped: {e}");
        }
    }
    run.summary("train", &body)
}

pub fn cmd_stats(run: &Run) -> CliResult<()> {
    let (store, problem) = run.dataset()?;
    let cfg = run.config.shuffle_config(run.config.seed)?;
    let report = monte_carlo_offline_variance(&store, &problem, &cfg, run.config.trials, run.config.seed)?;
    let mut w = run.writer("variance.csv")?;
    w.write_record([
        "config_hash",
        "num_blocks",
        "block_size",
        "n",
        "replacement",
        "in_place",
        "offline_passes",
        "trials",
        "sigma2",
        "blockwise_variance",
        "h_d",
        "predicted_h_prime",
        "predicted_bound",
        "mc_mean",
        "mc_halfwidth_95",
        "within_bound",
    ])?;
    w.write_record([
        run.hash.to_string(),
        store.num_blocks().to_string(),
        store.block_size().to_string(),
        cfg.n.to_string(),
        run.config.shuffle.replacement.clone(),
        cfg.in_place.to_string(),
        cfg.offline_passes.to_string(),
        report.trials.to_string(),
        fmt_f(report.sigma2),
        fmt_f(report.blockwise_variance),
        fmt_f(report.h_d),
        fmt_f(report.predicted_h_prime),
        fmt_f(report.predicted_bound),
        fmt_f(report.mc_mean),
        fmt_f(report.mc_halfwidth_95),
        report.within_bound(0.0).to_string(),
    ])?;
    w.flush()?;
    run.summary(
        "stats",
        &format!(
            "h_D: {}\npredicted h'_D: {}\nbound h'_D·sigma2/b: {}\nMonte Carlo mean: {} ± {}\n",
            report.h_d,
            report.predicted_h_prime,
            report.predicted_bound,
            report.mc_mean,
            report.mc_halfwidth_95
        ),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformitySummary {
    pub strategy: Strategy,
    pub mean_abs_displacement: f64,
    pub mean_spearman: f64,
    pub mean_abs_spearman: f64,
    pub mean_position_ks: f64,
}

/// Mean uniformity metrics of the first-epoch order of `strategy` over `seeds`.
pub fn uniformity_sweep(
    store: &BlockStore,
    strategy: Strategy,
    config: &ExperimentConfig,
    seeds: &[u64],
) -> CliResult<UniformitySummary> {
    let reports: Vec<UniformityReport> = seeds
        .par_iter()
        .map(|&seed| -> CliResult<UniformityReport> {
            let stream = build_stream(store.fork(), strategy, &config.shuffle_config(seed)?, 1)?;
            Ok(uniformity_metrics(&stream.epoch_origins(0))?)
        })
        .collect::<CliResult<_>>()?;
    let k = reports.len() as f64;
    let avg = |f: fn(&UniformityReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Ok(UniformitySummary {
        strategy,
        mean_abs_displacement: avg(|r| r.mean_abs_displacement),
        mean_spearman: avg(|r| r.spearman_to_identity),
        mean_abs_spearman: avg(|r| r.spearman_to_identity.abs()),
        mean_position_ks: avg(|r| r.position_ks),
    })
}

pub fn cmd_uniformity(run: &Run) -> CliResult<()> {
    let (store, _) = run.dataset()?;
    let seeds = run.trial_seeds();
    let mut w = run.writer("uniformity.csv")?;
    w.write_record([
        "config_hash",
        "strategy",
        "trials",
        "mean_abs_displacement",
        "mean_spearman",
        "mean_abs_spearman",
        "mean_position_ks",
    ])?;
    let mut body = String::new();
    for strategy in Strategy::ALL {
        let s = uniformity_sweep(&store, strategy, &run.config, &seeds)?;
        w.write_record([
            run.hash.to_string(),
            strategy.to_string(),
            seeds.len().to_string(),
            fmt_f(s.mean_abs_displacement),
            fmt_f(s.mean_spearman),
            fmt_f(s.mean_abs_spearman),
            fmt_f(s.mean_position_ks),
        ])?;
        let _ = writeln!(body, "{strategy}: mean |spearman| {}", s.mean_abs_spearman);
    }
    w.flush()?;
    run.summary("uniformity", &body)
}

/// Strategies with a closed-form query count.
pub const TABLE_STRATEGIES: [Strategy; 4] =
    [Strategy::FullShuffle, Strategy::ShuffleOnce, Strategy::CorgiPile, Strategy::Corgi2];

pub fn cmd_complexity(run: &Run) -> CliResult<()> {
    let (store, _) = run.dataset()?;
    let cfg = run.config.shuffle_config(run.config.seed)?;
    let m = store.num_records() as u64;
    let b = store.block_size() as u64;
    let mut w = run.writer("complexity.csv")?;
    w.write_record([
        "config_hash",
        "strategy",
        "m",
        "b",
        "T",
        "predicted_offline",
        "predicted_online",
        "measured_offline",
        "measured_online",
        "match",
    ])?;
    let mut failures = Vec::new();
    for strategy in TABLE_STRATEGIES {
        for &epochs in &run.config.complexity.epochs {
            let e = epochs as u64;
            let passes = cfg.offline_passes as u64;
            let prediction = if strategy == Strategy::Corgi2 && cfg.in_place {
                predict_corgi2_in_place(m, b, e, passes)
            } else {
                predict_queries(strategy, m, b, e, passes)
            }
            .map_err(|err| CliError::Contract(err.to_string()))?;
            let stream = build_stream(store.fork(), strategy, &cfg, epochs)?;
            let ok = match reconcile(&prediction, &stream.ledger) {
                Ok(_) => true,
                Err(err @ ComplexityError::Mismatch { .. }) => {
                    failures.push(format!("T={epochs}: {err}"));
                    false
                }
                Err(err) => return Err(CliError::Contract(err.to_string())),
            };
            w.write_record([
                run.hash.to_string(),
                strategy.to_string(),
                m.to_string(),
                b.to_string(),
                epochs.to_string(),
                prediction.offline.to_string(),
                prediction.online.to_string(),
                stream.ledger.offline().to_string(),
                stream.ledger.online().to_string(),
                ok.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let body = if failures.is_empty() {
        "all measured ledgers match the closed-form counts\n".to_string()
    } else {
        failures.join("\n") + "\n"
    };
    run.summary("complexity", &body)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Reconciliation(failures.join("; ")))
    }
}
