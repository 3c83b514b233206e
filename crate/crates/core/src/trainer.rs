//! Per-example SGD over a [`ShuffleStream`] with a per-round decaying step,
//! cubic-weighted averaging of round-end iterates, and rate analysis.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::objective::{sq_dist, ObjectiveError, QuadraticProblem};
use crate::shuffling::{ShuffleStream, Strategy};
use crate::statistics::{predict_h_prime, StatsError};
use crate::storage::LedgerSnapshot;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule parameter: {0}")]
    Parameter(&'static str),
    #[error("iterate diverged in round {round} (|x| = {norm})")]
    Divergence { round: usize, norm: f64 },
    #[error("need at least {needed} rounds for a rate fit, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("rate report needs at least two strategies")]
    TooFewStrategies,
    #[error("runs to average must share the same round grid")]
    MismatchedRuns,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    /// Blocks per buffer.
    pub n: usize,
    pub b: usize,
    /// Strong convexity `μ`.
    pub mu: f64,
    /// Schedule offset `a`.
    pub a: f64,
    pub x0: Vec<f64>,
    /// Constant step size instead of the decaying schedule.
    pub eta_override: Option<f64>,
    /// Radius around the optimum the trajectory is expected to stay in.
    pub radius: Option<f64>,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.b == 0 {
            return Err(TrainError::Parameter("n and b must be positive"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(TrainError::Parameter("mu must be positive"));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(TrainError::Parameter("a must be positive"));
        }
        if let Some(eta) = self.eta_override {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(TrainError::Parameter("fixed eta must be positive"));
            }
        }
        Ok(())
    }
}

/// `η_t = 6 / (b·n·μ·(t + a))` with the 0-based `round` mapped to `t = round + 1`.
pub fn lr_schedule(cfg: &SgdConfig, round: usize) -> f64 {
    6.0 / (cfg.b as f64 * cfg.n as f64 * cfg.mu * (round as f64 + 1.0 + cfg.a))
}

/// Smallest admissible schedule offset:
/// `max{(8LG + 24L² + 28·L_H·G)/μ², 24L/μ}`.
pub fn a_lower_bound(l: f64, g: f64, l_h: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(TrainError::Parameter("mu must be positive"));
    }
    Ok(((8.0 * l * g + 24.0 * l * l + 28.0 * l_h * g) / (mu * mu)).max(24.0 * l / mu))
}

/// Normalized averaging weights `(t + a)³` for 1-based `t = 1..=rounds`.
pub fn averaging_weights(a: f64, rounds: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=rounds).map(|t| (t as f64 + a).powi(3)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Examples processed through the end of this round.
    pub t_seen: usize,
    pub eta: f64,
    pub suboptimality: f64,
    pub suboptimality_of_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub final_x: Vec<f64>,
    /// `Σ(t+a)³ x_t / Σ(t+a)³` over round-end iterates.
    pub weighted_avg_x: Vec<f64>,
    pub rounds: Vec<RoundRecord>,
    pub ledger_snapshot: LedgerSnapshot,
    /// Largest `‖x − x*‖` seen at a round end.
    pub max_distance: f64,
    /// Set when `max_distance` exceeded the configured radius.
    pub left_ball: bool,
}

impl TrainResult {
    pub fn final_suboptimality_of_avg(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.suboptimality_of_avg)
    }

    /// Mean curve over runs sharing the same round grid. Iterates are averaged too.
    pub fn average(runs: &[TrainResult]) -> Result<TrainResult> {
        let first = runs.first().ok_or(TrainError::MismatchedRuns)?;
        let k = runs.len() as f64;
        if runs.iter().any(|r| {
            r.rounds.len() != first.rounds.len()
                || r.rounds.iter().zip(&first.rounds).any(|(a, b)| a.t_seen != b.t_seen)
        }) {
            return Err(TrainError::MismatchedRuns);
        }
        let mean_vec = |f: &dyn Fn(&TrainResult) -> &Vec<f64>| -> Vec<f64> {
            let mut acc = vec![0.0; f(first).len()];
            for r in runs {
                for (a, v) in acc.iter_mut().zip(f(r)) {
                    *a += v / k;
                }
            }
            acc
        };
        let rounds = first
            .rounds
            .iter()
            .enumerate()
            .map(|(i, r0)| RoundRecord {
                round: r0.round,
                t_seen: r0.t_seen,
                eta: r0.eta,
                suboptimality: runs.iter().map(|r| r.rounds[i].suboptimality).sum::<f64>() / k,
                suboptimality_of_avg: runs.iter().map(|r| r.rounds[i].suboptimality_of_avg).sum::<f64>() / k,
            })
            .collect();
        Ok(TrainResult {
            final_x: mean_vec(&|r| &r.final_x),
            weighted_avg_x: mean_vec(&|r| &r.weighted_avg_x),
            rounds,
            ledger_snapshot: first.ledger_snapshot,
            max_distance: runs.iter().map(|r| r.max_distance).fold(0.0, f64::max),
            left_ball: runs.iter().any(|r| r.left_ball),
        })
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs `x ← x − η_t ∇f_i(x)` through the stream. The step is constant within a
/// round and the iterate carries over between rounds.
pub fn run_sgd(stream: &ShuffleStream, problem: &QuadraticProblem, cfg: &SgdConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.x0.len() != problem.dim() {
        return Err(ObjectiveError::Dimension { expected: problem.dim(), got: cfg.x0.len() }.into());
    }
    let limit = 1e6 * (1.0 + norm(&cfg.x0));
    let optimum = problem.optimum();
    let mut x = cfg.x0.clone();
    let mut weighted_sum = vec![0.0; x.len()];
    let mut weight_total = 0.0;
    let mut avg = x.clone();
    let mut rounds = Vec::with_capacity(stream.rounds.len());
    let mut t_seen = 0usize;
    let mut max_distance = 0.0f64;

    for (t, round) in stream.rounds.iter().enumerate() {
        let eta = cfg.eta_override.unwrap_or_else(|| lr_schedule(cfg, t));
        for item in stream.round_items(t) {
            let c = problem.center(item.index)?;
            for (xk, ck) in x.iter_mut().zip(c) {
                *xk -= eta * (*xk - ck);
            }
        }
        t_seen += round.len;
        let n = norm(&x);
        if !n.is_finite() || n > limit {
            return Err(TrainError::Divergence { round: t, norm: n });
        }
        let w = (t as f64 + 1.0 + cfg.a).powi(3);
        weight_total += w;
        for ((s, a), xk) in weighted_sum.iter_mut().zip(avg.iter_mut()).zip(&x) {
            *s += w * xk;
            *a = *s / weight_total;
        }
        max_distance = max_distance.max(sq_dist(&x, optimum).sqrt());
        rounds.push(RoundRecord {
            round: t,
            t_seen,
            eta,
            suboptimality: 0.5 * sq_dist(&x, optimum),
            suboptimality_of_avg: 0.5 * sq_dist(&avg, optimum),
        });
    }

    Ok(TrainResult {
        final_x: x,
        weighted_avg_x: avg,
        rounds,
        ledger_snapshot: stream.ledger,
        max_distance,
        left_ball: cfg.radius.is_some_and(|r| max_distance > r),
    })
}

/// Least-squares slope of `log y` against `log x`. Non-positive points are skipped.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if logs.len() < 2 {
        return None;
    }
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Slope of the weighted-average suboptimality over the last decade of `T`
/// (rounds with `T ≥ T_final / 10`).
pub fn final_decade_slope(rounds: &[RoundRecord]) -> Result<f64> {
    const MIN_ROUNDS: usize = 10;
    if rounds.len() < MIN_ROUNDS {
        return Err(TrainError::InsufficientData { needed: MIN_ROUNDS, got: rounds.len() });
    }
    let t_final = rounds.last().map_or(0, |r| r.t_seen) as f64;
    let pts: Vec<(f64, f64)> = rounds
        .iter()
        .filter(|r| r.t_seen as f64 >= t_final / 10.0)
        .map(|r| (r.t_seen as f64, r.suboptimality_of_avg))
        .collect();
    loglog_slope(&pts).ok_or(TrainError::InsufficientData { needed: MIN_ROUNDS, got: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateParams {
    pub num_blocks: usize,
    pub n: usize,
    pub b: usize,
    pub h_d: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRate {
    pub final_t: usize,
    pub final_suboptimality_of_avg: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// `(n − 1)/(N − 1)`.
    pub alpha: f64,
    /// `α² + (1 − α)²(b − 1)²`.
    pub beta: f64,
    /// `n³/N³`.
    pub gamma: f64,
    pub h_prime: f64,
    /// `(1 − α)·h_D·σ²/T` at the final `T`.
    pub leading_term_corgipile: f64,
    /// `(1 − α)·h'_D·σ²/T` at the final `T`.
    pub leading_term_corgi2: f64,
    pub strategies: BTreeMap<Strategy, StrategyRate>,
}

pub fn rate_coefficients(num_blocks: usize, n: usize, b: usize) -> (f64, f64, f64) {
    let alpha = if num_blocks > 1 { (n as f64 - 1.0) / (num_blocks as f64 - 1.0) } else { 1.0 };
    let beta = alpha * alpha + (1.0 - alpha).powi(2) * (b as f64 - 1.0).powi(2);
    let gamma = (n as f64 / num_blocks as f64).powi(3);
    (alpha, beta, gamma)
}

pub fn rate_report(results: &BTreeMap<Strategy, TrainResult>, params: &RateParams) -> Result<RateReport> {
    if results.len() < 2 {
        return Err(TrainError::TooFewStrategies);
    }
    let (alpha, beta, gamma) = rate_coefficients(params.num_blocks, params.n, params.b);
    let h_prime = predict_h_prime(params.h_d, params.n, params.b)?;
    let mut strategies = BTreeMap::new();
    let mut final_t = 0usize;
    for (&s, r) in results {
        let slope = final_decade_slope(&r.rounds)?;
        let last = r.rounds.last().expect("checked non-empty");
        final_t = final_t.max(last.t_seen);
        strategies.insert(
            s,
            StrategyRate {
                final_t: last.t_seen,
                final_suboptimality_of_avg: last.suboptimality_of_avg,
                slope,
            },
        );
    }
    let t = final_t as f64;
    Ok(RateReport {
        alpha,
        beta,
        gamma,
        h_prime,
        leading_term_corgipile: (1.0 - alpha) * params.h_d * params.sigma2 / t,
        leading_term_corgi2: (1.0 - alpha) * h_prime * params.sigma2 / t,
        strategies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shuffling::{baseline_stream, Round};
    use crate::storage::{BlockStore, ExampleRecord};

    fn cfg(n: usize, b: usize, a: f64, x0: Vec<f64>) -> SgdConfig {
        SgdConfig { n, b, mu: 1.0, a, x0, eta_override: None, radius: None }
    }

    #[test]
    fn schedule_values() {
        let c = cfg(5, 10, 100.0, vec![0.0]);
        assert!((lr_schedule(&c, 0) - 6.0 / (50.0 * 101.0)).abs() < 1e-18);
        assert!((lr_schedule(&c, 0) - 1.188e-3).abs() < 1e-6);
        let etas: Vec<f64> = (0..1000).map(|t| lr_schedule(&c, t)).collect();
        assert!(etas.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        assert!(lr_schedule(&c, 10_000_000) < 1e-7);
        assert_eq!(a_lower_bound(1.0, 10.0, 0.0, 1.0).unwrap(), 104.0);
        assert_eq!(a_lower_bound(0.1, 0.0, 0.0, 1.0).unwrap(), 2.4000000000000004);
        assert!(cfg(5, 10, 0.0, vec![0.0]).validate().is_err());
    }

    #[test]
    fn weights_normalize() {
        for a in [0.5, 10.0, 260.0] {
            let w = averaging_weights(a, 777);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v > 0.0));
        }
    }

    fn single_example_stream(center_index: u64) -> ShuffleStream {
        ShuffleStream {
            items: vec![ExampleRecord::new(center_index, vec![0.0])],
            rounds: vec![Round { start: 0, len: 1, epoch: 0, blocks: vec![0] }],
            ledger: LedgerSnapshot::default(),
        }
    }

    #[test]
    fn unit_step_lands_on_center() {
        let p = QuadraticProblem::new(vec![vec![0.0]]).unwrap();
        let mut c = cfg(1, 1, 1.0, vec![5.0]);
        c.eta_override = Some(1.0);
        let r = run_sgd(&single_example_stream(0), &p, &c).unwrap();
        assert_eq!(r.final_x, vec![0.0]);
        assert_eq!(r.weighted_avg_x, vec![0.0]);
    }

    #[test]
    fn empty_stream_returns_x0() {
        let p = QuadraticProblem::new(vec![vec![1.0]]).unwrap();
        let r = run_sgd(&ShuffleStream::default(), &p, &cfg(1, 1, 1.0, vec![3.0])).unwrap();
        assert_eq!(r.final_x, vec![3.0]);
        assert_eq!(r.weighted_avg_x, vec![3.0]);
        assert!(r.rounds.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let p = QuadraticProblem::new(vec![vec![0.0]]).unwrap();
        let mut c = cfg(1, 1, 1.0, vec![1.0]);
        c.eta_override = Some(5.0); // |1 − η| = 4 per step
        let stream = ShuffleStream {
            items: vec![ExampleRecord::new(0, vec![0.0]); 40],
            rounds: (0..40).map(|i| Round { start: i, len: 1, epoch: 0, blocks: vec![] }).collect(),
            ledger: LedgerSnapshot::default(),
        };
        assert!(matches!(run_sgd(&stream, &p, &c), Err(TrainError::Divergence { round: 10, .. })));
    }

    #[test]
    fn sequential_epoch_contracts() {
        let recs = (0..12).map(|i| ExampleRecord::new(i, vec![(i % 5) as f64])).collect();
        let store = BlockStore::create(4, 3, 1, recs).unwrap();
        let p = QuadraticProblem::from_store(&store).unwrap();
        let stream = baseline_stream(&store, Strategy::Sequential, 1, 4, 0).unwrap();
        let mut c = cfg(4, 3, 1.0, vec![40.0]);
        c.eta_override = Some(0.5);
        let r = run_sgd(&stream, &p, &c).unwrap();
        let before = (40.0 - p.optimum()[0]).abs();
        let after = (r.final_x[0] - p.optimum()[0]).abs();
        assert!(after / before < 1.0);
    }

    #[test]
    fn rate_coefficients_hand_values() {
        let (alpha, _, gamma) = rate_coefficients(20, 5, 10);
        assert!((alpha - 4.0 / 19.0).abs() < 1e-15);
        assert!((gamma - 125.0 / 8000.0).abs() < 1e-15);
        let (alpha, beta, _) = rate_coefficients(20, 20, 10);
        assert_eq!((alpha, beta), (1.0, 1.0));
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = (1..100).map(|t| (t as f64, 3.0 / t as f64)).collect();
        assert!((loglog_slope(&pts).unwrap() + 1.0).abs() < 1e-12);
        let recs: Vec<RoundRecord> = (1..=5)
            .map(|t| RoundRecord {
                round: t,
                t_seen: t,
                eta: 0.0,
                suboptimality: 1.0,
                suboptimality_of_avg: 1.0,
            })
            .collect();
        assert!(matches!(final_decade_slope(&recs), Err(TrainError::InsufficientData { .. })));
    }
}
