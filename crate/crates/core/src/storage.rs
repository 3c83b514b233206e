//! Block-sharded dataset storage with exact query accounting.
//!
//! The cost model charges one query per access to a chunk, no matter how many
//! of its `b` records are consumed. A [`QueryLedger`] is shared (via `Arc`) by
//! every store living on the same backend, so an offline pass that reads one
//! store and writes another is charged to a single ledger.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub const MANIFEST_MAGIC: &[u8; 4] = b"CRG2";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.crg2";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("store must hold at least one record (N·b == 0)")]
    EmptyStore,
    #[error("expected {expected} records, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("payload dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("block size {got} does not match store block size {expected}")]
    BlockSizeMismatch { expected: usize, got: usize },
    #[error("block {id} not found (store has {slots} slots)")]
    BlockNotFound { id: usize, slots: usize },
    #[error("record offset {offset} out of range for block size {block_size}")]
    OffsetOutOfRange { offset: usize, block_size: usize },
    #[error("{0} is not permitted during the online phase")]
    PhaseViolation(&'static str),
    #[error("store has deleted blocks and cannot be serialized")]
    Incomplete,
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated block file {0}")]
    Truncated(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StorageError> = std::result::Result<T, E>;

/// One training example. `index` is the origin index in the original dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub index: u64,
    pub payload: Vec<f64>,
    pub label: Option<f64>,
}

impl ExampleRecord {
    pub fn new(index: u64, payload: Vec<f64>) -> Self {
        Self { index, payload, label: None }
    }

    pub fn with_label(mut self, label: f64) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub id: usize,
    pub records: Vec<ExampleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessPhase {
    Offline,
    Online,
}

/// Plain copy of the ledger counters at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub offline_reads: u64,
    pub offline_writes: u64,
    pub online_reads: u64,
    pub online_writes: u64,
}

impl LedgerSnapshot {
    pub fn offline(&self) -> u64 {
        self.offline_reads + self.offline_writes
    }

    pub fn online(&self) -> u64 {
        self.online_reads + self.online_writes
    }

    pub fn total(&self) -> u64 {
        self.offline() + self.online()
    }
}

/// Query counters. Counting is atomic so concurrent readers are accounted exactly.
///
/// The phase starts as offline and can only move forward to online. Writes
/// (including deletions) are rejected once the online phase has begun.
#[derive(Debug, Default)]
pub struct QueryLedger {
    offline_reads: AtomicU64,
    offline_writes: AtomicU64,
    online_reads: AtomicU64,
    online_writes: AtomicU64,
    online: AtomicBool,
}

impl QueryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phase(&self) -> AccessPhase {
        if self.online.load(Ordering::Acquire) {
            AccessPhase::Online
        } else {
            AccessPhase::Offline
        }
    }

    pub fn begin_online(&self) {
        self.online.store(true, Ordering::Release);
    }

    pub fn record_read(&self) {
        match self.phase() {
            AccessPhase::Offline => self.offline_reads.fetch_add(1, Ordering::Relaxed),
            AccessPhase::Online => self.online_reads.fetch_add(1, Ordering::Relaxed),
        };
    }

    pub fn record_write(&self) -> Result<()> {
        match self.phase() {
            AccessPhase::Offline => {
                self.offline_writes.fetch_add(1, Ordering::Relaxed);
                Ok(())
            }
            AccessPhase::Online => Err(StorageError::PhaseViolation("block write")),
        }
    }

    pub fn ensure_offline(&self, what: &'static str) -> Result<()> {
        match self.phase() {
            AccessPhase::Offline => Ok(()),
            AccessPhase::Online => Err(StorageError::PhaseViolation(what)),
        }
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            offline_reads: self.offline_reads.load(Ordering::Relaxed),
            offline_writes: self.offline_writes.load(Ordering::Relaxed),
            online_reads: self.online_reads.load(Ordering::Relaxed),
            online_writes: self.online_writes.load(Ordering::Relaxed),
        }
    }
}

/// A collection of fixed-size blocks addressed by id.
///
/// Slots are `None` after a deletion (in-place offline shuffling) until they are
/// overwritten. Reads and writes go through the ledger; [`BlockStore::blocks`]
/// is an uncounted inspection view used by analysis code.
#[derive(Debug)]
pub struct BlockStore {
    block_size: usize,
    dim: usize,
    slots: Vec<Option<Block>>,
    ledger: Arc<QueryLedger>,
}

impl BlockStore {
    /// Lays `records` into `num_blocks` blocks in order: block `i` holds
    /// records `[i·b, (i+1)·b)`. The ledger starts at zero.
    pub fn create(
        num_blocks: usize,
        block_size: usize,
        dim: usize,
        records: Vec<ExampleRecord>,
    ) -> Result<Self> {
        if num_blocks == 0 || block_size == 0 {
            return Err(StorageError::EmptyStore);
        }
        let expected = num_blocks * block_size;
        if records.len() != expected {
            return Err(StorageError::LengthMismatch { expected, got: records.len() });
        }
        if let Some(r) = records.iter().find(|r| r.payload.len() != dim) {
            return Err(StorageError::DimensionMismatch { expected: dim, got: r.payload.len() });
        }
        let mut slots = Vec::with_capacity(num_blocks);
        let mut it = records.into_iter();
        for id in 0..num_blocks {
            let records: Vec<_> = it.by_ref().take(block_size).collect();
            slots.push(Some(Block { id, records }));
        }
        Ok(Self { block_size, dim, slots, ledger: Arc::new(QueryLedger::new()) })
    }

    /// An empty store on the same backend (shared ledger) with the given block size.
    pub fn sibling(&self, block_size: usize) -> Self {
        Self { block_size, dim: self.dim, slots: Vec::new(), ledger: Arc::clone(&self.ledger) }
    }

    /// Deep copy of the blocks with a fresh, zeroed ledger.
    pub fn fork(&self) -> Self {
        Self {
            block_size: self.block_size,
            dim: self.dim,
            slots: self.slots.clone(),
            ledger: Arc::new(QueryLedger::new()),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.slots.len()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_records(&self) -> usize {
        self.slots.len() * self.block_size
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    pub fn shared_ledger(&self) -> Arc<QueryLedger> {
        Arc::clone(&self.ledger)
    }

    pub fn begin_online(&self) {
        self.ledger.begin_online();
    }

    /// Reads a whole block: one query.
    pub fn read_block(&self, id: usize) -> Result<&Block> {
        let block = self.slot(id)?;
        self.ledger.record_read();
        Ok(block)
    }

    /// Reads a single record: also one query, since it touches one chunk.
    pub fn read_example(&self, id: usize, offset: usize) -> Result<&ExampleRecord> {
        let block = self.slot(id)?;
        let record = block
            .records
            .get(offset)
            .ok_or(StorageError::OffsetOutOfRange { offset, block_size: self.block_size })?;
        self.ledger.record_read();
        Ok(record)
    }

    /// Persists a new block under a fresh id: one query.
    pub fn write_block(&mut self, records: Vec<ExampleRecord>) -> Result<usize> {
        self.check_block(&records)?;
        self.ledger.record_write()?;
        let id = self.slots.len();
        self.slots.push(Some(Block { id, records }));
        Ok(id)
    }

    /// Overwrites (or refills) an existing slot: one query.
    pub fn write_block_at(&mut self, id: usize, records: Vec<ExampleRecord>) -> Result<()> {
        if id >= self.slots.len() {
            return Err(StorageError::BlockNotFound { id, slots: self.slots.len() });
        }
        self.check_block(&records)?;
        self.ledger.record_write()?;
        self.slots[id] = Some(Block { id, records });
        Ok(())
    }

    /// Deletes a block. Deletion is a storage mutation and is charged as a write.
    pub fn delete_block(&mut self, id: usize) -> Result<()> {
        self.slot(id)?;
        self.ledger.record_write()?;
        self.slots[id] = None;
        Ok(())
    }

    /// Uncounted view of the live blocks, in id order.
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.slots.iter().flatten()
    }

    /// Uncounted view of every live record, in storage order.
    pub fn records(&self) -> impl Iterator<Item = &ExampleRecord> {
        self.blocks().flat_map(|b| b.records.iter())
    }

    fn slot(&self, id: usize) -> Result<&Block> {
        self.slots
            .get(id)
            .and_then(Option::as_ref)
            .ok_or(StorageError::BlockNotFound { id, slots: self.slots.len() })
    }

    fn check_block(&self, records: &[ExampleRecord]) -> Result<()> {
        if records.len() != self.block_size {
            return Err(StorageError::BlockSizeMismatch { expected: self.block_size, got: records.len() });
        }
        if let Some(r) = records.iter().find(|r| r.payload.len() != self.dim) {
            return Err(StorageError::DimensionMismatch { expected: self.dim, got: r.payload.len() });
        }
        Ok(())
    }
}

pub fn block_file_name(id: usize) -> String {
    format!("{id:08}.blk")
}

/// Writes the store under `dir`: one manifest plus one file per block.
///
/// Manifest: `CRG2`, version (u32 LE), then N, b, d, m (u64 LE).
/// Block file: `b` records of origin index (u64 LE), label flag (u8),
/// label (f64 LE, only when the flag is 1), then `d` payload values (f64 LE).
pub fn serialize_store(store: &BlockStore, dir: &Path) -> Result<()> {
    if !store.is_complete() {
        return Err(StorageError::Incomplete);
    }
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(40);
    manifest.extend_from_slice(MANIFEST_MAGIC);
    manifest.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [store.num_blocks(), store.block_size(), store.dim(), store.num_records()] {
        manifest.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;

    for block in store.blocks() {
        let mut buf = Vec::with_capacity(store.block_size() * (17 + 8 * store.dim()));
        for r in &block.records {
            buf.extend_from_slice(&r.index.to_le_bytes());
            match r.label {
                Some(label) => {
                    buf.push(1);
                    buf.extend_from_slice(&label.to_le_bytes());
                }
                None => buf.push(0),
            }
            for v in &r.payload {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(dir.join(block_file_name(block.id)))?;
        f.write_all(&buf)?;
    }
    Ok(())
}

/// Loads a store written by [`serialize_store`]. The ledger is not persisted;
/// the loaded store starts with a zeroed ledger.
pub fn deserialize_store(dir: &Path) -> Result<BlockStore> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path)?;
    let format_err =
        |reason: &str| StorageError::Format { path: manifest_path.clone(), reason: reason.to_string() };
    if bytes.len() < 8 || &bytes[..4] != MANIFEST_MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StorageError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() != 8 + 4 * 8 {
        return Err(format_err("manifest has wrong length"));
    }
    let field = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap());
    let to_usize = |v: u64| usize::try_from(v).map_err(|_| format_err("count overflows usize"));
    let (num_blocks, block_size, dim, m) =
        (to_usize(field(0))?, to_usize(field(1))?, to_usize(field(2))?, field(3));
    if num_blocks as u64 * block_size as u64 != m {
        return Err(format_err("m != N·b"));
    }

    let mut records = Vec::with_capacity(num_blocks * block_size);
    for id in 0..num_blocks {
        let path = dir.join(block_file_name(id));
        let data = fs::read(&path)?;
        let mut cursor = io::Cursor::new(data.as_slice());
        for _ in 0..block_size {
            records.push(read_record(&mut cursor, dim, &path)?);
        }
        if (cursor.position() as usize) != data.len() {
            return Err(StorageError::Format { path, reason: "trailing bytes".into() });
        }
    }
    BlockStore::create(num_blocks, block_size, dim, records)
}

fn read_record(cursor: &mut io::Cursor<&[u8]>, dim: usize, path: &Path) -> Result<ExampleRecord> {
    let truncated = |_| StorageError::Truncated(path.to_path_buf());
    let mut u64buf = [0u8; 8];
    cursor.read_exact(&mut u64buf).map_err(truncated)?;
    let index = u64::from_le_bytes(u64buf);
    let mut flag = [0u8; 1];
    cursor.read_exact(&mut flag).map_err(truncated)?;
    let label = match flag[0] {
        0 => None,
        1 => {
            cursor.read_exact(&mut u64buf).map_err(truncated)?;
            Some(f64::from_le_bytes(u64buf))
        }
        other => {
            return Err(StorageError::Format {
                path: path.to_path_buf(),
                reason: format!("invalid label flag {other}"),
            })
        }
    };
    let mut payload = Vec::with_capacity(dim);
    for _ in 0..dim {
        cursor.read_exact(&mut u64buf).map_err(truncated)?;
        payload.push(f64::from_le_bytes(u64buf));
    }
    Ok(ExampleRecord { index, payload, label })
}
