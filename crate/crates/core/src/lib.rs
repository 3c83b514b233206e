//! Storage-aware partial shuffling for SGD.
//!
//! A dataset lives in `N` fixed-size blocks behind a [`storage::QueryLedger`]
//! that counts every chunk access. The [`shuffling`] module builds training
//! streams (sequential, shuffle-once, full shuffle, online buffered shuffle,
//! and the two-phase offline re-mix + online buffered shuffle), [`objective`]
//! supplies a quadratic problem with exact constants, [`statistics`] measures
//! blockwise variance and shuffle uniformity, [`trainer`] runs SGD over a
//! stream, and [`complexity`] predicts and reconciles query counts.

pub mod cli;
pub mod complexity;
pub mod objective;
pub mod rng;
pub mod shuffling;
pub mod statistics;
pub mod storage;
pub mod trainer;

pub use complexity::{predict_queries, reconcile, QueryPrediction};
pub use objective::{make_clustered_dataset, ClusterLayout, HomogeneitySpec, QuadraticProblem};
pub use shuffling::{
    baseline_stream, corgi2_stream, corgipile_stream, offline_corgi_shuffle, Replacement, ShuffleConfig,
    ShuffleStream, Strategy,
};
pub use statistics::{measure_h_d, monte_carlo_offline_variance, uniformity_metrics, VarianceReport};
pub use storage::{BlockStore, ExampleRecord, LedgerSnapshot, QueryLedger};
pub use trainer::{run_sgd, SgdConfig, TrainResult};
