//! Versioned TOML experiment configuration.
//!
//! ```toml
//! version = 1
//! seed = 7
//! trials = 50
//!
//! [problem]
//! num_blocks = 20
//! block_size = 10
//! dim = 1
//! layout = "ladder"
//!
//! [shuffle]
//! strategy = "corgi2"
//! n = 5
//!
//! [train]
//! epochs = 25
//! mu = 1.0
//! a = "auto"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::objective::{ClusterLayout, HomogeneitySpec};
use crate::shuffling::{Replacement, ShuffleConfig, ShuffleError, Strategy};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("config error at `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub problem: ProblemSection,
    pub shuffle: ShuffleSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub complexity: ComplexitySection,
}

fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutName {
    Ladder,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub num_blocks: usize,
    pub block_size: usize,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "ladder")]
    pub layout: LayoutName,
    #[serde(default = "unit")]
    pub cluster_spread: f64,
    #[serde(default)]
    pub within_spread: f64,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn ladder() -> LayoutName {
    LayoutName::Ladder
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShuffleSection {
    #[serde(default = "corgi2")]
    pub strategy: String,
    pub n: usize,
    #[serde(default = "with")]
    pub replacement: String,
    #[serde(default)]
    pub in_place: bool,
    #[serde(default = "one")]
    pub offline_passes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline_block_size: Option<usize>,
}

fn corgi2() -> String {
    "corgi2".into()
}

fn with() -> String {
    "with".into()
}

/// `a = "auto"` derives the offset from the problem constants and `radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Offset {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "unit")]
    pub mu: f64,
    #[serde(default = "auto")]
    pub a: Offset,
    /// Starting point; defaults to the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Fixed step size instead of the decaying schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            mu: 1.0,
            a: auto(),
            x0: None,
            radius: default_radius(),
            eta: None,
            strategies: default_strategies(),
        }
    }
}

fn default_epochs() -> usize {
    10
}

fn default_radius() -> f64 {
    20.0
}

fn auto() -> Offset {
    Offset::Keyword("auto".into())
}

fn default_strategies() -> Vec<String> {
    ["full_shuffle", "corgipile", "corgi2"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexitySection {
    #[serde(default = "default_epoch_grid")]
    pub epochs: Vec<usize>,
}

impl Default for ComplexitySection {
    fn default() -> Self {
        Self { epochs: default_epoch_grid() }
    }
}

fn default_epoch_grid() -> Vec<usize> {
    vec![1, 5, 10]
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Parses and validates; schema errors carry the offending field path.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| ConfigError::Schema { path: ".".into(), message: e.to_string() })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        let p = &self.problem;
        if p.num_blocks == 0 {
            return Err(invalid("problem.num_blocks", "must be positive"));
        }
        if p.block_size == 0 {
            return Err(invalid("problem.block_size", "must be positive"));
        }
        if p.dim == 0 {
            return Err(invalid("problem.dim", "must be positive"));
        }
        if !(p.cluster_spread >= 0.0 && p.cluster_spread.is_finite()) {
            return Err(invalid("problem.cluster_spread", "must be finite and non-negative"));
        }
        if !(p.within_spread >= 0.0 && p.within_spread.is_finite()) {
            return Err(invalid("problem.within_spread", "must be finite and non-negative"));
        }

        let s = &self.shuffle;
        self.strategy()?;
        self.replacement()?;
        if s.n == 0 || s.n > p.num_blocks {
            return Err(invalid("shuffle.n", format!("must be in 1..={}", p.num_blocks)));
        }
        if let Some(on) = s.online_n {
            if on == 0 {
                return Err(invalid("shuffle.online_n", "must be positive"));
            }
        }
        if s.in_place && self.replacement()? == Replacement::With {
            return Err(invalid("shuffle.in_place", "in-place rewriting requires replacement = \"without\""));
        }
        if let Some(bs) = s.offline_block_size {
            if bs == 0 {
                return Err(invalid("shuffle.offline_block_size", "must be positive"));
            }
            if s.in_place && bs != p.block_size {
                return Err(invalid("shuffle.offline_block_size", "in-place rewriting keeps the block size"));
            }
            if self.replacement()? == Replacement::Without && !(s.n * p.block_size).is_multiple_of(bs) {
                return Err(invalid(
                    "shuffle.offline_block_size",
                    "must divide n·block_size without replacement",
                ));
            }
        }

        let t = &self.train;
        if !(t.mu > 0.0 && t.mu.is_finite()) {
            return Err(invalid("train.mu", "must be positive"));
        }
        if !(t.radius > 0.0 && t.radius.is_finite()) {
            return Err(invalid("train.radius", "must be positive"));
        }
        self.offset_value()?;
        if let Some(x0) = &t.x0 {
            if x0.len() != p.dim {
                return Err(invalid("train.x0", format!("expected {} coordinates", p.dim)));
            }
        }
        if let Some(eta) = t.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(invalid("train.eta", "must be positive"));
            }
        }
        self.train_strategies()?;
        if self.complexity.epochs.is_empty() {
            return Err(invalid("complexity.epochs", "must list at least one epoch count"));
        }
        if self.trials == 0 {
            return Err(invalid("trials", "must be positive"));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Result<Strategy, ConfigError> {
        self.shuffle.strategy.parse().map_err(|e: ShuffleError| invalid("shuffle.strategy", e.to_string()))
    }

    pub fn replacement(&self) -> Result<Replacement, ConfigError> {
        self.shuffle.replacement.parse().map_err(|e: String| invalid("shuffle.replacement", e))
    }

    pub fn train_strategies(&self) -> Result<Vec<Strategy>, ConfigError> {
        if self.train.strategies.is_empty() {
            return Err(invalid("train.strategies", "must list at least one strategy"));
        }
        self.train
            .strategies
            .iter()
            .map(|s| s.parse().map_err(|e: ShuffleError| invalid("train.strategies", e.to_string())))
            .collect()
    }

    /// `Some(a)` for an explicit offset, `None` for `"auto"`.
    pub fn offset_value(&self) -> Result<Option<f64>, ConfigError> {
        match &self.train.a {
            Offset::Value(a) if *a > 0.0 && a.is_finite() => Ok(Some(*a)),
            Offset::Value(_) => Err(invalid("train.a", "must be positive")),
            Offset::Keyword(k) if k == "auto" => Ok(None),
            Offset::Keyword(k) => {
                Err(invalid("train.a", format!("expected a number or \"auto\", got \"{k}\"")))
            }
        }
    }

    pub fn homogeneity(&self) -> HomogeneitySpec {
        HomogeneitySpec {
            cluster_spread: self.problem.cluster_spread,
            within_spread: self.problem.within_spread,
            layout: match self.problem.layout {
                LayoutName::Ladder => ClusterLayout::Ladder,
                LayoutName::Gaussian => ClusterLayout::Gaussian,
            },
        }
    }

    pub fn shuffle_config(&self, seed: u64) -> Result<ShuffleConfig, ConfigError> {
        let s = &self.shuffle;
        Ok(ShuffleConfig {
            n: s.n,
            replacement: self.replacement()?,
            in_place: s.in_place,
            offline_passes: s.offline_passes,
            seed,
            online_n: s.online_n,
            offline_block_size: s.offline_block_size,
        })
    }

    /// Canonical TOML of everything that influences results (the output
    /// directory is excluded).
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        toml::to_string(&c).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> ConfigHash {
        let digest = Sha256::digest(self.canonical().as_bytes());
        ConfigHash(hex::encode(digest)[..16].to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigHash(pub String);

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
