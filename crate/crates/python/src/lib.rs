//! Python bindings: block stores, the shuffling strategies, variance and
//! uniformity statistics, query-count predictions and SGD training.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use corgi2::complexity;
use corgi2::objective::{make_clustered_dataset, ClusterLayout, HomogeneitySpec, QuadraticProblem};
use corgi2::shuffling::{self, Replacement, ShuffleConfig, ShuffleStream, Strategy};
use corgi2::statistics;
use corgi2::storage::{self, ExampleRecord, LedgerSnapshot, StorageError};
use corgi2::trainer::{self, SgdConfig, TrainError};

fn value_error(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn storage_error(e: StorageError) -> PyErr {
    match e {
        StorageError::Io(io) => PyOSError::new_err(io.to_string()),
        other => value_error(other),
    }
}

fn parse_strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(value_error)
}

fn parse_layout(name: &str) -> PyResult<ClusterLayout> {
    match name {
        "ladder" => Ok(ClusterLayout::Ladder),
        "gaussian" => Ok(ClusterLayout::Gaussian),
        other => Err(PyValueError::new_err(format!("unknown layout '{other}' (expected ladder|gaussian)"))),
    }
}

fn shuffle_config(
    n: usize,
    seed: u64,
    replacement: &str,
    in_place: bool,
    passes: usize,
) -> PyResult<ShuffleConfig> {
    let replacement: Replacement = replacement.parse().map_err(PyValueError::new_err)?;
    Ok(ShuffleConfig { replacement, in_place, offline_passes: passes, ..ShuffleConfig::new(n, seed) })
}

fn ledger_dict<'py>(py: Python<'py>, s: &LedgerSnapshot) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("offline_reads", s.offline_reads)?;
    d.set_item("offline_writes", s.offline_writes)?;
    d.set_item("online_reads", s.online_reads)?;
    d.set_item("online_writes", s.online_writes)?;
    d.set_item("total", s.total())?;
    Ok(d)
}

/// A dataset stored as fixed-size blocks, with a query ledger.
#[pyclass(name = "BlockStore", module = "pycorgi2", frozen)]
pub struct PyBlockStore {
    inner: storage::BlockStore,
}

#[pymethods]
impl PyBlockStore {
    /// Synthetic clustered dataset; block `i` is centered by `layout`.
    #[staticmethod]
    #[pyo3(signature = (num_blocks, block_size, dim=1, layout="ladder", cluster_spread=1.0, within_spread=0.0, seed=0))]
    fn clustered(
        num_blocks: usize,
        block_size: usize,
        dim: usize,
        layout: &str,
        cluster_spread: f64,
        within_spread: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = HomogeneitySpec { cluster_spread, within_spread, layout: parse_layout(layout)? };
        let inner = make_clustered_dataset(num_blocks, block_size, dim, &spec, seed).map_err(value_error)?;
        Ok(Self { inner })
    }

    /// One-dimensional store whose record `i` holds the value `i`.
    #[staticmethod]
    fn from_indices(num_blocks: usize, block_size: usize) -> PyResult<Self> {
        let records =
            (0..num_blocks * block_size).map(|i| ExampleRecord::new(i as u64, vec![i as f64])).collect();
        let inner = storage::BlockStore::create(num_blocks, block_size, 1, records).map_err(storage_error)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: storage::deserialize_store(&path).map_err(storage_error)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        storage::serialize_store(&self.inner, &path).map_err(storage_error)
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks()
    }

    #[getter]
    fn block_size(&self) -> usize {
        self.inner.block_size()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_records(&self) -> usize {
        self.inner.num_records()
    }

    /// Origin index of every record, in storage order.
    fn origins(&self) -> Vec<u64> {
        self.inner.records().map(|r| r.index).collect()
    }

    /// Origin indices grouped by block.
    fn blocks(&self) -> Vec<Vec<u64>> {
        self.inner.blocks().map(|b| b.records.iter().map(|r| r.index).collect()).collect()
    }

    fn payloads(&self) -> Vec<Vec<f64>> {
        self.inner.records().map(|r| r.payload.clone()).collect()
    }

    fn ledger<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        ledger_dict(py, &self.inner.ledger().snapshot())
    }

    /// `h_D`, `σ²` and the blockwise variance of the store's quadratic problem.
    fn homogeneity<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let problem = QuadraticProblem::from_store(&self.inner).map_err(value_error)?;
        let hd = statistics::measure_h_d(&self.inner, &problem).map_err(value_error)?;
        let d = PyDict::new(py);
        d.set_item("sigma2", hd.sigma2)?;
        d.set_item("blockwise_variance", hd.blockwise_variance)?;
        d.set_item("h_d", hd.h_d)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "BlockStore(num_blocks={}, block_size={}, dim={})",
            self.inner.num_blocks(),
            self.inner.block_size(),
            self.inner.dim()
        )
    }
}

/// An ordered training stream with round boundaries and the ledger it cost.
#[pyclass(name = "Stream", module = "pycorgi2", frozen)]
pub struct PyStream {
    inner: ShuffleStream,
}

#[pymethods]
impl PyStream {
    fn origins(&self) -> Vec<u64> {
        self.inner.origins()
    }

    fn epoch_origins(&self, epoch: usize) -> Vec<u64> {
        self.inner.epoch_origins(epoch)
    }

    fn round_lengths(&self) -> Vec<usize> {
        self.inner.rounds.iter().map(|r| r.len).collect()
    }

    fn ledger<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        ledger_dict(py, &self.inner.ledger)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Offline re-mixing passes over a copy of `store` (with a fresh ledger).
#[pyfunction]
#[pyo3(signature = (store, n, seed=0, replacement="with", in_place=false, passes=1))]
fn offline_shuffle(
    py: Python<'_>,
    store: &PyBlockStore,
    n: usize,
    seed: u64,
    replacement: &str,
    in_place: bool,
    passes: usize,
) -> PyResult<PyBlockStore> {
    let cfg = shuffle_config(n, seed, replacement, in_place, passes)?;
    let copy = store.inner.fork();
    let inner = py.detach(|| shuffling::offline_passes(copy, &cfg)).map_err(value_error)?;
    Ok(PyBlockStore { inner })
}

/// Training stream of `strategy` over a copy of `store`.
#[pyfunction]
#[pyo3(signature = (store, strategy, n, epochs, seed=0, replacement="with", in_place=false, passes=1))]
#[allow(clippy::too_many_arguments)]
fn stream(
    py: Python<'_>,
    store: &PyBlockStore,
    strategy: &str,
    n: usize,
    epochs: usize,
    seed: u64,
    replacement: &str,
    in_place: bool,
    passes: usize,
) -> PyResult<PyStream> {
    let strategy = parse_strategy(strategy)?;
    let cfg = shuffle_config(n, seed, replacement, in_place, passes)?;
    let copy = store.inner.fork();
    let inner = py.detach(|| shuffling::build_stream(copy, strategy, &cfg, epochs)).map_err(value_error)?;
    Ok(PyStream { inner })
}

#[pyfunction]
fn predict_h_prime(h_d: f64, n: usize, b: usize) -> PyResult<f64> {
    statistics::predict_h_prime(h_d, n, b).map_err(value_error)
}

#[pyfunction]
fn variance_ratio(h_d: f64, n: usize, b: usize) -> PyResult<f64> {
    statistics::variance_ratio(h_d, n, b).map_err(value_error)
}

#[pyfunction]
fn improves(h_d: f64, n: usize, b: usize) -> PyResult<bool> {
    statistics::improves(h_d, n, b).map_err(value_error)
}

/// Mean post-shuffle blockwise variance over `trials` independent offline shuffles.
#[pyfunction]
#[pyo3(signature = (store, n, trials, seed=0, replacement="with", in_place=false, passes=1))]
#[allow(clippy::too_many_arguments)]
fn monte_carlo_variance<'py>(
    py: Python<'py>,
    store: &PyBlockStore,
    n: usize,
    trials: usize,
    seed: u64,
    replacement: &str,
    in_place: bool,
    passes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = shuffle_config(n, seed, replacement, in_place, passes)?;
    let problem = QuadraticProblem::from_store(&store.inner).map_err(value_error)?;
    let r = py
        .detach(|| statistics::monte_carlo_offline_variance(&store.inner, &problem, &cfg, trials, seed))
        .map_err(value_error)?;
    let d = PyDict::new(py);
    d.set_item("sigma2", r.sigma2)?;
    d.set_item("blockwise_variance", r.blockwise_variance)?;
    d.set_item("h_d", r.h_d)?;
    d.set_item("predicted_h_prime", r.predicted_h_prime)?;
    d.set_item("predicted_bound", r.predicted_bound)?;
    d.set_item("mc_mean", r.mc_mean)?;
    d.set_item("mc_halfwidth_95", r.mc_halfwidth_95)?;
    d.set_item("trials", r.trials)?;
    Ok(d)
}

#[pyfunction]
fn uniformity<'py>(py: Python<'py>, perm: Vec<u64>) -> PyResult<Bound<'py, PyDict>> {
    let r = statistics::uniformity_metrics(&perm).map_err(value_error)?;
    let d = PyDict::new(py);
    d.set_item("mean_abs_displacement", r.mean_abs_displacement)?;
    d.set_item("spearman_to_identity", r.spearman_to_identity)?;
    d.set_item("position_ks", r.position_ks)?;
    Ok(d)
}

/// Closed-form query counts as `(offline, online, total)`.
#[pyfunction]
#[pyo3(signature = (strategy, m, b, epochs, passes=1, in_place=false))]
fn predict_queries(
    strategy: &str,
    m: u64,
    b: u64,
    epochs: u64,
    passes: u64,
    in_place: bool,
) -> PyResult<(u64, u64, u64)> {
    let strategy = parse_strategy(strategy)?;
    let p = if in_place && strategy == Strategy::Corgi2 {
        complexity::predict_corgi2_in_place(m, b, epochs, passes)
    } else {
        complexity::predict_queries(strategy, m, b, epochs, passes)
    }
    .map_err(value_error)?;
    Ok((p.offline, p.online, p.total))
}

/// SGD on the store's quadratic problem over the stream of `strategy`.
/// `a=None` uses the smallest admissible schedule offset for `radius`.
#[pyfunction]
#[pyo3(signature = (store, strategy, n, epochs, seed=0, mu=1.0, a=None, x0=None, eta=None, radius=20.0, replacement="with", passes=1))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    store: &PyBlockStore,
    strategy: &str,
    n: usize,
    epochs: usize,
    seed: u64,
    mu: f64,
    a: Option<f64>,
    x0: Option<Vec<f64>>,
    eta: Option<f64>,
    radius: f64,
    replacement: &str,
    passes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let strategy = parse_strategy(strategy)?;
    let cfg = shuffle_config(n, seed, replacement, false, passes)?;
    let problem = QuadraticProblem::from_store(&store.inner).map_err(value_error)?;
    let a = match a {
        Some(a) => a,
        None => {
            let c = problem.constants(radius).map_err(value_error)?;
            trainer::a_lower_bound(c.lipschitz, c.gradient_bound, c.hessian_lipschitz, mu)
                .map_err(value_error)?
        }
    };
    let sgd = SgdConfig {
        n,
        b: store.inner.block_size(),
        mu,
        a,
        x0: x0.unwrap_or_else(|| vec![0.0; problem.dim()]),
        eta_override: eta,
        radius: Some(radius),
    };
    let copy = store.inner.fork();
    let result = py
        .detach(|| -> Result<_, String> {
            let stream = shuffling::build_stream(copy, strategy, &cfg, epochs).map_err(|e| e.to_string())?;
            trainer::run_sgd(&stream, &problem, &sgd).map_err(|e| match e {
                TrainError::Divergence { .. } => format!("diverged: {e}"),
                other => other.to_string(),
            })
        })
        .map_err(|msg| {
            if msg.starts_with("diverged") {
                PyRuntimeError::new_err(msg)
            } else {
                PyValueError::new_err(msg)
            }
        })?;
    let d = PyDict::new(py);
    d.set_item("a", a)?;
    d.set_item("final_x", result.final_x.clone())?;
    d.set_item("weighted_avg_x", result.weighted_avg_x.clone())?;
    d.set_item("t_seen", result.rounds.iter().map(|r| r.t_seen).collect::<Vec<_>>())?;
    d.set_item("eta", result.rounds.iter().map(|r| r.eta).collect::<Vec<_>>())?;
    d.set_item("suboptimality", result.rounds.iter().map(|r| r.suboptimality).collect::<Vec<_>>())?;
    d.set_item(
        "suboptimality_of_weighted_avg",
        result.rounds.iter().map(|r| r.suboptimality_of_avg).collect::<Vec<_>>(),
    )?;
    d.set_item("left_ball", result.left_ball)?;
    d.set_item("ledger", ledger_dict(py, &result.ledger_snapshot)?)?;
    Ok(d)
}

#[pymodule]
fn pycorgi2(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBlockStore>()?;
    m.add_class::<PyStream>()?;
    m.add_function(wrap_pyfunction!(offline_shuffle, m)?)?;
    m.add_function(wrap_pyfunction!(stream, m)?)?;
    m.add_function(wrap_pyfunction!(predict_h_prime, m)?)?;
    m.add_function(wrap_pyfunction!(variance_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(improves, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_variance, m)?)?;
    m.add_function(wrap_pyfunction!(uniformity, m)?)?;
    m.add_function(wrap_pyfunction!(predict_queries, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("STRATEGIES", Strategy::ALL.map(|s| s.name()).to_vec())?;
    Ok(())
}
