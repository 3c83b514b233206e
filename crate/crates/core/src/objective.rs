//! Quadratic test objective `f_i(x) = ½‖x − c_i‖²` and clustered dataset synthesis.
//!
//! The quadratic has identity Hessian, so `L = μ = 1`, `L_H = 0`, and the
//! per-example gradient noise `∇f_i(x) − ∇F(x) = c̄ − c_i` does not depend on
//! `x`. That makes the blockwise variance, `σ²` and `h_D` exact.

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::{substream, Purpose};
use crate::storage::{BlockStore, ExampleRecord, StorageError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("problem needs at least one center")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("origin index {index} out of range for {len} centers")]
    Index { index: u64, len: usize },
    #[error("store origin indices are not a permutation of 0..m")]
    NotOriginal,
    #[error("spread must be finite and non-negative, got {0}")]
    Spread(f64),
    #[error("domain radius must be positive, got {0}")]
    Radius(f64),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

/// Smoothness and noise constants of a problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    /// Gradient Lipschitz constant `L`.
    pub lipschitz: f64,
    /// Gradient bound `G`, valid on the ball of the requested radius around the optimum.
    pub gradient_bound: f64,
    /// Hessian Lipschitz constant `L_H`.
    pub hessian_lipschitz: f64,
    /// Strong convexity `μ`.
    pub strong_convexity: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    centers: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let dim = centers.first().ok_or(ObjectiveError::Empty)?.len();
        if let Some(c) = centers.iter().find(|c| c.len() != dim) {
            return Err(ObjectiveError::Dimension { expected: dim, got: c.len() });
        }
        let mut mean = vec![0.0; dim];
        for c in &centers {
            for (m, v) in mean.iter_mut().zip(c) {
                *m += v;
            }
        }
        let m = centers.len() as f64;
        mean.iter_mut().for_each(|v| *v /= m);
        Ok(Self { centers, mean })
    }

    /// Builds the problem from an original (unshuffled) store: center `i` is the
    /// payload of the record whose origin index is `i`.
    pub fn from_store(store: &BlockStore) -> Result<Self> {
        let m = store.num_records();
        let mut centers: Vec<Option<Vec<f64>>> = vec![None; m];
        for r in store.records() {
            let slot = centers.get_mut(r.index as usize).ok_or(ObjectiveError::NotOriginal)?;
            if slot.replace(r.payload.clone()).is_some() {
                return Err(ObjectiveError::NotOriginal);
            }
        }
        let centers: Option<Vec<_>> = centers.into_iter().collect();
        Self::new(centers.ok_or(ObjectiveError::NotOriginal)?)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn center(&self, index: u64) -> Result<&[f64]> {
        self.centers
            .get(index as usize)
            .map(Vec::as_slice)
            .ok_or(ObjectiveError::Index { index, len: self.centers.len() })
    }

    /// `x* = c̄`.
    pub fn optimum(&self) -> &[f64] {
        &self.mean
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(ObjectiveError::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn loss_i(&self, index: u64, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(0.5 * sq_dist(x, self.center(index)?))
    }

    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let total: f64 = self.centers.iter().map(|c| sq_dist(x, c)).sum();
        Ok(0.5 * total / self.len() as f64)
    }

    /// `∇f_i(x) = x − c_i`.
    pub fn grad(&self, index: u64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(x.iter().zip(self.center(index)?).map(|(a, c)| a - c).collect())
    }

    /// `∇F(x) = x − c̄`.
    pub fn full_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(x.iter().zip(&self.mean).map(|(a, c)| a - c).collect())
    }

    /// `F(x) − F(x*) = ½‖x − c̄‖²`.
    pub fn suboptimality(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(0.5 * sq_dist(x, &self.mean))
    }

    /// `σ² = (1/m) Σ ‖c_i − c̄‖²`.
    pub fn sigma2(&self) -> f64 {
        self.centers.iter().map(|c| sq_dist(c, &self.mean)).sum::<f64>() / self.len() as f64
    }

    pub fn constants(&self, radius: f64) -> Result<ProblemConstants> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(ObjectiveError::Radius(radius));
        }
        let spread = self.centers.iter().map(|c| sq_dist(c, &self.mean).sqrt()).fold(0.0, f64::max);
        Ok(ProblemConstants {
            lipschitz: 1.0,
            gradient_bound: radius + spread,
            hessian_lipschitz: 0.0,
            strong_convexity: 1.0,
            sigma2: self.sigma2(),
        })
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterLayout {
    /// Block `i` is centered at `cluster_spread·(i+1)` in every coordinate.
    Ladder,
    /// Block centers drawn from `N(0, cluster_spread²)` per coordinate.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneitySpec {
    pub cluster_spread: f64,
    pub within_spread: f64,
    pub layout: ClusterLayout,
}

impl HomogeneitySpec {
    /// The ladder dataset: block `i` holds `b` copies of center `i+1`, so `h_D = b`.
    pub fn ladder() -> Self {
        Self { cluster_spread: 1.0, within_spread: 0.0, layout: ClusterLayout::Ladder }
    }
}

/// Synthesizes `N·b` records; record `j` of block `i` has origin index
/// `i·b + j` and payload `μ_i + ε_ij` with `ε_ij ~ N(0, within_spread²)`.
pub fn make_clustered_dataset(
    num_blocks: usize,
    block_size: usize,
    dim: usize,
    spec: &HomogeneitySpec,
    seed: u64,
) -> Result<BlockStore> {
    for s in [spec.cluster_spread, spec.within_spread] {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(ObjectiveError::Spread(s));
        }
    }
    if dim == 0 {
        return Err(ObjectiveError::Dimension { expected: 1, got: 0 });
    }
    let mut rng = substream(seed, Purpose::Dataset, 0, 0);
    let gaussian = |rng: &mut crate::rng::StreamRng, sd: f64| -> f64 {
        if sd == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sd).expect("finite sd").sample(rng)
        }
    };
    let mut records = Vec::with_capacity(num_blocks * block_size);
    for i in 0..num_blocks {
        let cluster: Vec<f64> = match spec.layout {
            ClusterLayout::Ladder => vec![spec.cluster_spread * (i + 1) as f64; dim],
            ClusterLayout::Gaussian => (0..dim).map(|_| gaussian(&mut rng, spec.cluster_spread)).collect(),
        };
        for j in 0..block_size {
            let payload = cluster.iter().map(|&c| c + gaussian(&mut rng, spec.within_spread)).collect();
            records.push(ExampleRecord::new((i * block_size + j) as u64, payload));
        }
    }
    Ok(BlockStore::create(num_blocks, block_size, dim, records)?)
}
