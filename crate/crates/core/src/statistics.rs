//! Variance utilities, blockwise-variance measurement, offline-shuffle
//! predictions and shuffle-uniformity metrics.
//!
//! All variances use the population convention (divide by the count).

use rayon::prelude::*;
use thiserror::Error;

use crate::objective::{sq_dist, ObjectiveError, QuadraticProblem};
use crate::rng::trial_seed;
use crate::shuffling::{offline_passes, ShuffleConfig, ShuffleError};
use crate::storage::BlockStore;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no samples")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("weights must be non-negative, finite and sum to a positive value")]
    Weights,
    #[error("paired samples differ in length ({0} vs {1})")]
    Unpaired(usize, usize),
    #[error("parameters out of range: n = {n}, b = {b}, h_D = {h_d}")]
    Parameters { n: usize, b: usize, h_d: f64 },
    #[error("h'_D / h_D is undefined at h_D = 0")]
    UndefinedRatio,
    #[error("improvement condition inapplicable: (n-1)b - 1 = {0} <= 0")]
    ConditionInapplicable(i64),
    #[error("blockwise variance depends on the probe point ({0} vs {1})")]
    ProbeDisagreement(f64, f64),
    #[error("Monte Carlo needs at least 2 trials, got {0}")]
    TooFewTrials(usize),
    #[error("input is not a permutation of 0..{0}")]
    NotPermutation(usize),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Shuffle(#[from] ShuffleError),
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

fn check_dims(samples: &[Vec<f64>]) -> Result<usize> {
    let dim = samples.first().ok_or(StatsError::Empty)?.len();
    if let Some(s) = samples.iter().find(|s| s.len() != dim) {
        return Err(StatsError::Dimension { expected: dim, got: s.len() });
    }
    Ok(dim)
}

fn normalized(weights: &[f64], len: usize) -> Result<Vec<f64>> {
    if weights.len() != len {
        return Err(StatsError::Unpaired(weights.len(), len));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || !(total > 0.0 && total.is_finite()) {
        return Err(StatsError::Weights);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

pub fn weighted_mean(samples: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let dim = check_dims(samples)?;
    let w = normalized(weights, samples.len())?;
    let mut mu = vec![0.0; dim];
    for (s, wi) in samples.iter().zip(&w) {
        for (m, v) in mu.iter_mut().zip(s) {
            *m += wi * v;
        }
    }
    Ok(mu)
}

pub fn mean(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    weighted_mean(samples, &vec![1.0; samples.len()])
}

/// `V(X) = E‖X − μ‖²` for a finite distribution with the given probabilities.
pub fn weighted_generalized_variance(samples: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let mu = weighted_mean(samples, weights)?;
    let w = normalized(weights, samples.len())?;
    Ok(samples.iter().zip(&w).map(|(s, wi)| wi * sq_dist(s, &mu)).sum())
}

/// `V(X) = (1/k) Σ ‖x − μ‖²` over equally likely samples.
pub fn generalized_variance(samples: &[Vec<f64>]) -> Result<f64> {
    weighted_generalized_variance(samples, &vec![1.0; samples.len()])
}

/// `E[XᵀX] − μᵀμ`, the moment form of the generalized variance.
pub fn variance_from_moments(samples: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let mu = weighted_mean(samples, weights)?;
    let w = normalized(weights, samples.len())?;
    let second: f64 = samples.iter().zip(&w).map(|(s, wi)| wi * s.iter().map(|v| v * v).sum::<f64>()).sum();
    Ok(second - mu.iter().map(|v| v * v).sum::<f64>())
}

/// Scalar cross covariance `E[(X − μ_X)ᵀ(Y − μ_Y)]` of a jointly distributed pair.
pub fn cross_covariance(xs: &[Vec<f64>], ys: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(StatsError::Unpaired(xs.len(), ys.len()));
    }
    let mx = weighted_mean(xs, weights)?;
    let my = weighted_mean(ys, weights)?;
    if mx.len() != my.len() {
        return Err(StatsError::Dimension { expected: mx.len(), got: my.len() });
    }
    let w = normalized(weights, xs.len())?;
    Ok(xs
        .iter()
        .zip(ys)
        .zip(&w)
        .map(|((x, y), wi)| {
            wi * x
                .iter()
                .zip(&mx)
                .zip(y.iter().zip(&my))
                .map(|((a, ma), (b, mb))| (a - ma) * (b - mb))
                .sum::<f64>()
        })
        .sum())
}

/// Two-stage sampling: pick a group uniformly, then a member of it uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalVariance {
    /// `V(X)` of the two-stage draw.
    pub total: f64,
    /// `V(E[X | group])`.
    pub between: f64,
    /// `E[V(X | group)]`.
    pub within: f64,
}

pub fn total_variance(groups: &[Vec<Vec<f64>>]) -> Result<TotalVariance> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(StatsError::Empty);
    }
    let g = groups.len() as f64;
    let mut flat = Vec::new();
    let mut flat_w = Vec::new();
    let mut means = Vec::with_capacity(groups.len());
    let mut within = 0.0;
    for group in groups {
        for s in group {
            flat.push(s.clone());
            flat_w.push(1.0 / (g * group.len() as f64));
        }
        means.push(mean(group)?);
        within += generalized_variance(group)? / g;
    }
    Ok(TotalVariance {
        total: weighted_generalized_variance(&flat, &flat_w)?,
        between: generalized_variance(&means)?,
        within,
    })
}

/// `(1/N) Σ_l ‖∇f_{B_l}(x) − ∇F(x)‖²` over the live blocks of `store`,
/// with gradients looked up by each record's origin index.
pub fn blockwise_variance(store: &BlockStore, problem: &QuadraticProblem, x: &[f64]) -> Result<f64> {
    let full = problem.full_grad(x)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for block in store.blocks() {
        let mut g = vec![0.0; x.len()];
        for r in &block.records {
            let c = problem.center(r.index)?;
            for ((gk, xk), ck) in g.iter_mut().zip(x).zip(c) {
                *gk += xk - ck;
            }
        }
        let inv = 1.0 / block.records.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        total += sq_dist(&g, &full);
        count += 1;
    }
    if count == 0 {
        return Err(StatsError::Empty);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HdMeasurement {
    pub sigma2: f64,
    pub blockwise_variance: f64,
    pub h_d: f64,
    /// `σ² = 0`: the bound is vacuous and `h_D` is reported as 0.
    pub degenerate: bool,
}

/// Measures `h_D = b·BV/σ²`, probing at `x = 0` and `x = e₁` and requiring
/// the two blockwise variances to agree to 1e-9 relative.
pub fn measure_h_d(store: &BlockStore, problem: &QuadraticProblem) -> Result<HdMeasurement> {
    let zero = vec![0.0; problem.dim()];
    let mut unit = zero.clone();
    unit[0] = 1.0;
    let at_zero = blockwise_variance(store, problem, &zero)?;
    let at_unit = blockwise_variance(store, problem, &unit)?;
    let scale = at_zero.abs().max(at_unit.abs()).max(f64::MIN_POSITIVE);
    if (at_zero - at_unit).abs() > 1e-9 * scale && (at_zero - at_unit).abs() > 1e-12 {
        return Err(StatsError::ProbeDisagreement(at_zero, at_unit));
    }
    let sigma2 = problem.sigma2();
    if sigma2 == 0.0 {
        return Ok(HdMeasurement { sigma2, blockwise_variance: at_zero, h_d: 0.0, degenerate: true });
    }
    Ok(HdMeasurement {
        sigma2,
        blockwise_variance: at_zero,
        h_d: store.block_size() as f64 * at_zero / sigma2,
        degenerate: false,
    })
}

fn check_params(h_d: f64, n: usize, b: usize) -> Result<()> {
    if n == 0 || b == 0 || !(h_d >= 0.0 && h_d.is_finite()) {
        return Err(StatsError::Parameters { n, b, h_d });
    }
    Ok(())
}

/// Predicted homogeneity after one offline pass: `h'_D = 1 + (1/n − 1/(nb))·h_D`.
pub fn predict_h_prime(h_d: f64, n: usize, b: usize) -> Result<f64> {
    check_params(h_d, n, b)?;
    let (n, b) = (n as f64, b as f64);
    Ok(1.0 + (1.0 / n - 1.0 / (n * b)) * h_d)
}

/// `h'_D` iterated over `passes` offline passes (0 passes returns `h_D`).
pub fn predict_h_after_passes(h_d: f64, n: usize, b: usize, passes: usize) -> Result<f64> {
    (0..passes).try_fold(h_d, |h, _| predict_h_prime(h, n, b))
}

/// `h'_D / h_D = 1/h_D + (b − 1)/(nb)`.
pub fn variance_ratio(h_d: f64, n: usize, b: usize) -> Result<f64> {
    check_params(h_d, n, b)?;
    if h_d == 0.0 {
        return Err(StatsError::UndefinedRatio);
    }
    let (n, b) = (n as f64, b as f64);
    Ok(1.0 / h_d + (b - 1.0) / (n * b))
}

/// `nb / ((n−1)b − 1)`, or `None` when the denominator is not positive.
pub fn improvement_threshold(n: usize, b: usize) -> Option<f64> {
    let denom = (n as i64 - 1) * b as i64 - 1;
    (denom > 0).then(|| (n * b) as f64 / denom as f64)
}

/// `h_D > nb / ((n−1)b − 1)`: a sufficient condition for `h'_D < h_D`.
pub fn improves(h_d: f64, n: usize, b: usize) -> Result<bool> {
    check_params(h_d, n, b)?;
    match improvement_threshold(n, b) {
        Some(t) => Ok(h_d > t),
        None => Err(StatsError::ConditionInapplicable((n as i64 - 1) * b as i64 - 1)),
    }
}

/// The exact break-even point of `h'_D / h_D < 1`, namely `nb / ((n−1)b + 1)`.
/// It is always below [`improvement_threshold`].
pub fn exact_improvement_threshold(n: usize, b: usize) -> f64 {
    (n * b) as f64 / ((n as f64 - 1.0) * b as f64 + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub sigma2: f64,
    /// Blockwise variance of the input store.
    pub blockwise_variance: f64,
    pub h_d: f64,
    /// `h_D` predicted after the configured number of offline passes.
    pub predicted_h_prime: f64,
    /// `predicted_h_prime · σ² / b`.
    pub predicted_bound: f64,
    pub mc_mean: f64,
    pub mc_halfwidth_95: f64,
    pub trials: usize,
    pub degenerate: bool,
}

impl VarianceReport {
    /// `mc_mean ≤ bound · (1 + slack)`; always true for degenerate problems.
    pub fn within_bound(&self, slack: f64) -> bool {
        self.degenerate || self.mc_mean <= self.predicted_bound * (1.0 + slack)
    }
}

/// Repeats the offline shuffle `trials` times with independent seeds and
/// reports the mean post-shuffle blockwise variance with a 95% normal
/// half-width. Trials run in parallel; the result does not depend on threading.
pub fn monte_carlo_offline_variance(
    store: &BlockStore,
    problem: &QuadraticProblem,
    cfg: &ShuffleConfig,
    trials: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if trials < 2 {
        return Err(StatsError::TooFewTrials(trials));
    }
    let hd = measure_h_d(store, problem)?;
    let passes = cfg.offline_passes.max(1);
    let h_prime = predict_h_after_passes(hd.h_d, cfg.n, store.block_size(), passes)?;
    let out_b = cfg.offline_block_size.unwrap_or(store.block_size());
    let probe = vec![0.0; problem.dim()];

    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let trial_cfg =
                ShuffleConfig { seed: trial_seed(seed, t as u64), offline_passes: passes, ..cfg.clone() };
            let shuffled = offline_passes(store.fork(), &trial_cfg)?;
            blockwise_variance(&shuffled, problem, &probe)
        })
        .collect::<Result<_>>()?;

    let k = samples.len() as f64;
    let mc_mean = samples.iter().sum::<f64>() / k;
    // standard error uses the unbiased sample variance
    let var = samples.iter().map(|s| (s - mc_mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(VarianceReport {
        sigma2: hd.sigma2,
        blockwise_variance: hd.blockwise_variance,
        h_d: hd.h_d,
        predicted_h_prime: h_prime,
        predicted_bound: h_prime * hd.sigma2 / out_b as f64,
        mc_mean,
        mc_halfwidth_95: 1.96 * (var / k).sqrt(),
        trials,
        degenerate: hd.degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformityReport {
    /// `(1/m) Σ |perm(i) − i| / m`.
    pub mean_abs_displacement: f64,
    /// Spearman rank correlation between position and value.
    pub spearman_to_identity: f64,
    /// KS distance of `perm(i)/m` over the first tenth of positions from U[0,1].
    pub position_ks: f64,
}

pub fn check_permutation(perm: &[u64]) -> Result<()> {
    let m = perm.len();
    let mut seen = vec![false; m];
    for &v in perm {
        match seen.get_mut(v as usize) {
            Some(s) if !*s => *s = true,
            _ => return Err(StatsError::NotPermutation(m)),
        }
    }
    Ok(())
}

pub fn uniformity_metrics(perm: &[u64]) -> Result<UniformityReport> {
    if perm.is_empty() {
        return Err(StatsError::Empty);
    }
    check_permutation(perm)?;
    let m = perm.len() as f64;
    let displacement: f64 =
        perm.iter().enumerate().map(|(i, &v)| (v as f64 - i as f64).abs()).sum::<f64>() / m / m;
    let spearman = if perm.len() < 2 {
        1.0
    } else {
        let d2: f64 = perm.iter().enumerate().map(|(i, &v)| (v as f64 - i as f64).powi(2)).sum();
        1.0 - 6.0 * d2 / (m * (m * m - 1.0))
    };
    let window = (perm.len() / 10).max(1);
    let mut values: Vec<f64> = perm[..window].iter().map(|&v| v as f64 / m).collect();
    Ok(UniformityReport {
        mean_abs_displacement: displacement,
        spearman_to_identity: spearman,
        position_ks: ks_uniform(&mut values),
    })
}

/// One-sample KS distance between `values` and U[0,1]. Sorts in place.
pub fn ks_uniform(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let w = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| ((k as f64 + 1.0) / w - v).max(v - k as f64 / w))
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// `Q_KS(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
