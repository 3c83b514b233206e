//! Closed-form query counts per strategy and exact reconciliation against a
//! measured ledger.

use std::fmt;

use thiserror::Error;

use crate::shuffling::Strategy;
use crate::storage::LedgerSnapshot;

#[derive(Debug, Error)]
pub enum ComplexityError {
    #[error("block size {b} must be positive and divide m = {m}")]
    Indivisible { m: u64, b: u64 },
    #[error("{strategy}: query counts do not reconcile: {}", join(.mismatches))]
    Mismatch { strategy: Strategy, mismatches: Vec<CounterMismatch> },
}

fn join(ms: &[CounterMismatch]) -> String {
    ms.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterMismatch {
    pub counter: &'static str,
    pub expected: u64,
    pub observed: u64,
}

impl fmt::Display for CounterMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} expected {} observed {}", self.counter, self.expected, self.observed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryPrediction {
    pub strategy: Strategy,
    pub offline: u64,
    pub online: u64,
    pub total: u64,
}

impl QueryPrediction {
    fn new(strategy: Strategy, offline: u64, online: u64) -> Self {
        Self { strategy, offline, online, total: offline + online }
    }
}

/// Query counts for `epochs` passes over `m` records stored in blocks of `b`.
///
/// | strategy     | offline          | online   |
/// |--------------|------------------|----------|
/// | full shuffle | 0                | T·m      |
/// | shuffle once | m + m/b          | T·m/b    |
/// | corgipile    | 0                | T·m/b    |
/// | corgi2       | passes · 2m/b    | T·m/b    |
/// | sequential   | 0                | T·m/b    |
pub fn predict_queries(
    strategy: Strategy,
    m: u64,
    b: u64,
    epochs: u64,
    offline_passes: u64,
) -> Result<QueryPrediction, ComplexityError> {
    if b == 0 || !m.is_multiple_of(b) {
        return Err(ComplexityError::Indivisible { m, b });
    }
    let blocks = m / b;
    let p = match strategy {
        Strategy::FullShuffle => QueryPrediction::new(strategy, 0, epochs * m),
        Strategy::ShuffleOnce => QueryPrediction::new(strategy, m + blocks, epochs * blocks),
        Strategy::CorgiPile | Strategy::Sequential => QueryPrediction::new(strategy, 0, epochs * blocks),
        Strategy::Corgi2 => QueryPrediction::new(strategy, offline_passes * 2 * blocks, epochs * blocks),
    };
    Ok(p)
}

/// Corgi² with in-place offline passes: each pass also deletes every source
/// block, and deletions are charged as writes (3m/b per pass).
pub fn predict_corgi2_in_place(
    m: u64,
    b: u64,
    epochs: u64,
    offline_passes: u64,
) -> Result<QueryPrediction, ComplexityError> {
    let base = predict_queries(Strategy::Corgi2, m, b, epochs, offline_passes)?;
    Ok(QueryPrediction::new(Strategy::Corgi2, offline_passes * 3 * (m / b), base.online))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reconciliation {
    pub prediction: QueryPrediction,
    pub measured: LedgerSnapshot,
}

/// Requires exact equality of the offline and online totals.
pub fn reconcile(
    prediction: &QueryPrediction,
    ledger: &LedgerSnapshot,
) -> Result<Reconciliation, ComplexityError> {
    let mismatches: Vec<CounterMismatch> =
        [("offline", prediction.offline, ledger.offline()), ("online", prediction.online, ledger.online())]
            .into_iter()
            .filter(|(_, e, o)| e != o)
            .map(|(counter, expected, observed)| CounterMismatch { counter, expected, observed })
            .collect();
    if mismatches.is_empty() {
        Ok(Reconciliation { prediction: *prediction, measured: *ledger })
    } else {
        Err(ComplexityError::Mismatch { strategy: prediction.strategy, mismatches })
    }
}
