//! Shuffle strategies over a [`BlockStore`].
//!
//! Terminology used throughout: a *round* is one buffer of `n` blocks whose
//! `n·b` records are permuted and emitted together; an *epoch* is
//! `⌈N/n⌉` rounds that together touch every block once.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::rng::{fisher_yates, substream, Purpose};
use crate::storage::{BlockStore, ExampleRecord, LedgerSnapshot, StorageError};

#[derive(Debug, Error)]
pub enum ShuffleError {
    #[error("buffer size n = {n} must satisfy 1 <= n <= N = {num_blocks}")]
    BufferSize { n: usize, num_blocks: usize },
    #[error("in-place offline shuffling requires sampling without replacement")]
    InPlaceWithReplacement,
    #[error("in-place offline shuffling cannot change the block size")]
    InPlaceResize,
    #[error("a buffer of {buffer} records cannot be cut into blocks of {block_size}")]
    IndivisibleBuffer { buffer: usize, block_size: usize },
    #[error("block size must be positive")]
    ZeroBlockSize,
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("strategy {0} is not a baseline")]
    NotBaseline(Strategy),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

pub type Result<T, E = ShuffleError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Sequential,
    ShuffleOnce,
    /// Fresh uniform permutation every epoch with per-example access (random access SGD).
    FullShuffle,
    CorgiPile,
    Corgi2,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Sequential,
        Strategy::ShuffleOnce,
        Strategy::FullShuffle,
        Strategy::CorgiPile,
        Strategy::Corgi2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::ShuffleOnce => "shuffle_once",
            Strategy::FullShuffle => "full_shuffle",
            Strategy::CorgiPile => "corgipile",
            Strategy::Corgi2 => "corgi2",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ShuffleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Strategy::Sequential),
            "shuffle_once" => Ok(Strategy::ShuffleOnce),
            "full_shuffle" | "random_access" => Ok(Strategy::FullShuffle),
            "corgipile" => Ok(Strategy::CorgiPile),
            "corgi2" => Ok(Strategy::Corgi2),
            other => Err(ShuffleError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    With,
    Without,
}

impl FromStr for Replacement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "with" => Ok(Replacement::With),
            "without" => Ok(Replacement::Without),
            other => Err(format!("unknown replacement mode '{other}' (expected with|without)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleConfig {
    /// Blocks per buffer in the offline phase.
    pub n: usize,
    pub replacement: Replacement,
    pub in_place: bool,
    pub offline_passes: usize,
    pub seed: u64,
    /// Blocks per buffer in the online phase; defaults to `n`.
    pub online_n: Option<usize>,
    /// Block size written by the offline phase; defaults to the input block size.
    pub offline_block_size: Option<usize>,
}

impl ShuffleConfig {
    /// Offline sampling with replacement, one pass, separate output store.
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            replacement: Replacement::With,
            in_place: false,
            offline_passes: 1,
            seed,
            online_n: None,
            offline_block_size: None,
        }
    }

    pub fn without_replacement(mut self) -> Self {
        self.replacement = Replacement::Without;
        self
    }

    pub fn in_place(mut self) -> Self {
        self.replacement = Replacement::Without;
        self.in_place = true;
        self
    }

    pub fn passes(mut self, passes: usize) -> Self {
        self.offline_passes = passes;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn online_buffer(&self) -> usize {
        self.online_n.unwrap_or(self.n)
    }
}

/// One buffer's worth of the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Round {
    pub start: usize,
    pub len: usize,
    pub epoch: usize,
    /// Block ids loaded into the buffer; empty for per-example strategies.
    pub blocks: Vec<usize>,
}

/// The ordered examples one training run consumes, with round boundaries.
#[derive(Debug, Clone, Default)]
pub struct ShuffleStream {
    pub items: Vec<ExampleRecord>,
    pub rounds: Vec<Round>,
    /// Ledger state when the stream was fully produced.
    pub ledger: LedgerSnapshot,
}

impl ShuffleStream {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn round_items(&self, round: usize) -> &[ExampleRecord] {
        let r = &self.rounds[round];
        &self.items[r.start..r.start + r.len]
    }

    pub fn origins(&self) -> Vec<u64> {
        self.items.iter().map(|r| r.index).collect()
    }

    /// Origin indices of the items emitted during `epoch`.
    pub fn epoch_origins(&self, epoch: usize) -> Vec<u64> {
        self.rounds
            .iter()
            .filter(|r| r.epoch == epoch)
            .flat_map(|r| self.items[r.start..r.start + r.len].iter().map(|x| x.index))
            .collect()
    }

    fn push_round(&mut self, epoch: usize, blocks: Vec<usize>, items: Vec<ExampleRecord>) {
        self.rounds.push(Round { start: self.items.len(), len: items.len(), epoch, blocks });
        self.items.extend(items);
    }
}

/// Splits `count` blocks into consecutive buffers of `n`; the final buffer
/// holds the `count mod n` leftovers when `n` does not divide `count`.
fn buffer_sizes(count: usize, n: usize) -> impl Iterator<Item = usize> {
    let full = count / n;
    let rest = count % n;
    std::iter::repeat_n(n, full).chain((rest > 0).then_some(rest))
}

fn check_buffer(n: usize, num_blocks: usize) -> Result<()> {
    if n == 0 || n > num_blocks {
        return Err(ShuffleError::BufferSize { n, num_blocks });
    }
    Ok(())
}

/// One pass of the offline block re-mixing shuffle (pass index 0).
pub fn offline_corgi_shuffle(store: BlockStore, cfg: &ShuffleConfig) -> Result<BlockStore> {
    offline_corgi_shuffle_pass(store, cfg, 0)
}

/// One offline pass, with `pass` selecting independent random streams.
///
/// For each buffer: pick `n` blocks (i.i.d. uniform with replacement, or the
/// next `n` of a random block permutation without replacement), read them
/// into a buffer, then emit new blocks: each of `b'` records drawn i.i.d. from
/// the buffer (with replacement) or consecutive slices of a Fisher–Yates
/// permutation of the buffer (without replacement).
///
/// Output block ids are assigned in creation order, so buffer `l` produces
/// blocks `[l·n·b/b', (l+1)·n·b/b')`. In-place mode deletes each source block
/// once its buffer is full and rewrites the freed ids.
pub fn offline_corgi_shuffle_pass(
    mut store: BlockStore,
    cfg: &ShuffleConfig,
    pass: u32,
) -> Result<BlockStore> {
    let num_blocks = store.num_blocks();
    check_buffer(cfg.n, num_blocks)?;
    store.ledger().ensure_offline("offline shuffle")?;
    let b = store.block_size();
    let out_b = cfg.offline_block_size.unwrap_or(b);
    if out_b == 0 {
        return Err(ShuffleError::ZeroBlockSize);
    }
    if cfg.in_place {
        if cfg.replacement == Replacement::With {
            return Err(ShuffleError::InPlaceWithReplacement);
        }
        if out_b != b {
            return Err(ShuffleError::InPlaceResize);
        }
    }
    for k in buffer_sizes(num_blocks, cfg.n) {
        if !(k * b).is_multiple_of(out_b) {
            return Err(ShuffleError::IndivisibleBuffer { buffer: k * b, block_size: out_b });
        }
    }

    let groups: Vec<Vec<usize>> = match cfg.replacement {
        Replacement::With => buffer_sizes(num_blocks, cfg.n)
            .enumerate()
            .map(|(l, k)| {
                let mut rng = substream(cfg.seed, Purpose::OfflineSelect, pass, l as u64);
                (0..k).map(|_| rng.random_range(0..num_blocks)).collect()
            })
            .collect(),
        Replacement::Without => {
            let mut order: Vec<usize> = (0..num_blocks).collect();
            fisher_yates(&mut order, &mut substream(cfg.seed, Purpose::OfflineSelect, pass, 0));
            let mut rest = order.as_slice();
            buffer_sizes(num_blocks, cfg.n)
                .map(|k| {
                    let (head, tail) = rest.split_at(k);
                    rest = tail;
                    head.to_vec()
                })
                .collect()
        }
    };

    let mut output = if cfg.in_place { None } else { Some(store.sibling(out_b)) };
    for (l, group) in groups.iter().enumerate() {
        let mut buffer = Vec::with_capacity(group.len() * b);
        for &id in group {
            buffer.extend(store.read_block(id)?.records.iter().cloned());
        }
        let mut rng = substream(cfg.seed, Purpose::OfflineBuffer, pass, l as u64);
        let new_blocks: Vec<Vec<ExampleRecord>> = match cfg.replacement {
            Replacement::With => (0..buffer.len() / out_b)
                .map(|_| (0..out_b).map(|_| buffer[rng.random_range(0..buffer.len())].clone()).collect())
                .collect(),
            Replacement::Without => {
                fisher_yates(&mut buffer, &mut rng);
                buffer.chunks(out_b).map(<[ExampleRecord]>::to_vec).collect()
            }
        };
        match output.as_mut() {
            Some(out) => {
                for records in new_blocks {
                    out.write_block(records)?;
                }
            }
            None => {
                for &id in group {
                    store.delete_block(id)?;
                }
                for (&id, records) in group.iter().zip(new_blocks) {
                    store.write_block_at(id, records)?;
                }
            }
        }
    }
    Ok(output.unwrap_or(store))
}

/// Runs `cfg.offline_passes` offline passes, each consuming the previous output.
pub fn offline_passes(mut store: BlockStore, cfg: &ShuffleConfig) -> Result<BlockStore> {
    for pass in 0..cfg.offline_passes {
        store = offline_corgi_shuffle_pass(store, cfg, pass as u32)?;
    }
    Ok(store)
}

/// Online buffered shuffle. Switches the ledger to the online phase.
///
/// Each epoch draws a random block order; consecutive groups of `n` blocks
/// form a round whose records are Fisher–Yates permuted. Every block is read
/// exactly once per epoch.
pub fn corgipile_stream(store: &BlockStore, n: usize, epochs: usize, seed: u64) -> Result<ShuffleStream> {
    let num_blocks = store.num_blocks();
    check_buffer(n, num_blocks)?;
    store.begin_online();
    let mut stream = ShuffleStream::default();
    let mut round = 0u64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..num_blocks).collect();
        fisher_yates(&mut order, &mut substream(seed, Purpose::OnlineEpoch, 0, epoch as u64));
        for group in order.chunks(n) {
            let mut buffer = Vec::with_capacity(group.len() * store.block_size());
            for &id in group {
                buffer.extend(store.read_block(id)?.records.iter().cloned());
            }
            fisher_yates(&mut buffer, &mut substream(seed, Purpose::OnlineRound, 0, round));
            stream.push_round(epoch, group.to_vec(), buffer);
            round += 1;
        }
    }
    stream.ledger = store.ledger().snapshot();
    Ok(stream)
}

/// Offline re-mixing passes followed by the online buffered shuffle.
/// Returns the re-mixed store and the training stream.
pub fn corgi2_stream(
    store: BlockStore,
    cfg: &ShuffleConfig,
    epochs: usize,
) -> Result<(BlockStore, ShuffleStream)> {
    let shuffled = offline_passes(store, cfg)?;
    let stream = corgipile_stream(&shuffled, cfg.online_buffer(), epochs, cfg.seed)?;
    Ok((shuffled, stream))
}

/// Baseline strategies. `round_blocks` only sets the round markers (every
/// `round_blocks·b` items) so learning-rate schedules line up with the
/// buffered strategies; it does not change what is read.
pub fn baseline_stream(
    store: &BlockStore,
    kind: Strategy,
    epochs: usize,
    round_blocks: usize,
    seed: u64,
) -> Result<ShuffleStream> {
    let num_blocks = store.num_blocks();
    check_buffer(round_blocks, num_blocks)?;
    let b = store.block_size();
    let mut stream = ShuffleStream::default();
    match kind {
        Strategy::Sequential => {
            store.begin_online();
            sequential_epochs(store, epochs, round_blocks, &mut stream)?;
        }
        Strategy::ShuffleOnce => {
            let shuffled = shuffle_once_offline(store, seed)?;
            shuffled.begin_online();
            sequential_epochs(&shuffled, epochs, round_blocks, &mut stream)?;
        }
        Strategy::FullShuffle => {
            store.begin_online();
            let round_len = round_blocks * b;
            for epoch in 0..epochs {
                let mut positions: Vec<(usize, usize)> =
                    (0..num_blocks).flat_map(|id| (0..b).map(move |o| (id, o))).collect();
                fisher_yates(&mut positions, &mut substream(seed, Purpose::FullShuffle, 0, epoch as u64));
                for chunk in positions.chunks(round_len) {
                    let mut items = Vec::with_capacity(chunk.len());
                    for &(id, offset) in chunk {
                        items.push(store.read_example(id, offset)?.clone());
                    }
                    stream.push_round(epoch, Vec::new(), items);
                }
            }
        }
        other => return Err(ShuffleError::NotBaseline(other)),
    }
    stream.ledger = store.ledger().snapshot();
    Ok(stream)
}

/// Shuffle-once offline phase: `m` single-record reads and `m/b` block
/// writes into a fresh store that shares the input's ledger.
pub fn shuffle_once_offline(store: &BlockStore, seed: u64) -> Result<BlockStore> {
    store.ledger().ensure_offline("shuffle-once offline phase")?;
    let b = store.block_size();
    let mut positions: Vec<(usize, usize)> =
        (0..store.num_blocks()).flat_map(|id| (0..b).map(move |o| (id, o))).collect();
    fisher_yates(&mut positions, &mut substream(seed, Purpose::ShuffleOnce, 0, 0));
    let mut shuffled = store.sibling(b);
    for chunk in positions.chunks(b) {
        let mut records = Vec::with_capacity(b);
        for &(id, offset) in chunk {
            records.push(store.read_example(id, offset)?.clone());
        }
        shuffled.write_block(records)?;
    }
    Ok(shuffled)
}

fn sequential_epochs(
    store: &BlockStore,
    epochs: usize,
    round_blocks: usize,
    stream: &mut ShuffleStream,
) -> Result<()> {
    let ids: Vec<usize> = (0..store.num_blocks()).collect();
    for epoch in 0..epochs {
        for group in ids.chunks(round_blocks) {
            let mut items = Vec::with_capacity(group.len() * store.block_size());
            for &id in group {
                items.extend(store.read_block(id)?.records.iter().cloned());
            }
            stream.push_round(epoch, group.to_vec(), items);
        }
    }
    Ok(())
}

/// Dispatches to the strategy's stream builder. For [`Strategy::Corgi2`] the
/// offline passes run first; `cfg.n` doubles as the round grouping for baselines.
pub fn build_stream(
    store: BlockStore,
    strategy: Strategy,
    cfg: &ShuffleConfig,
    epochs: usize,
) -> Result<ShuffleStream> {
    match strategy {
        Strategy::Corgi2 => corgi2_stream(store, cfg, epochs).map(|(_, s)| s),
        Strategy::CorgiPile => corgipile_stream(&store, cfg.online_buffer(), epochs, cfg.seed),
        baseline => baseline_stream(&store, baseline, epochs, cfg.online_buffer(), cfg.seed),
    }
}
