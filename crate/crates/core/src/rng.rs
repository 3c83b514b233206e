//! Seeded, splittable randomness.
//!
//! Every random decision in a run draws from a ChaCha8 generator keyed by the
//! run seed and placed on its own stream, so results depend only on
//! `(seed, purpose, pass, index)` and never on evaluation order or threading.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a sub-stream is used for. The discriminant is folded into the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    OfflineSelect = 1,
    OfflineBuffer = 2,
    OnlineEpoch = 3,
    OnlineRound = 4,
    ShuffleOnce = 5,
    FullShuffle = 6,
    Dataset = 7,
    Trial = 8,
}

pub fn substream(seed: u64, purpose: Purpose, pass: u32, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = ((purpose as u64) << 56) | ((u64::from(pass) & 0xff_ffff) << 32) | (index & 0xffff_ffff);
    rng.set_stream(stream);
    rng
}

/// Seed for the `index`-th independent trial of a Monte Carlo sweep.
pub fn trial_seed(seed: u64, index: u64) -> u64 {
    substream(seed, Purpose::Trial, 0, index).next_u64()
}

/// In-place Fisher–Yates shuffle; every permutation is equally likely.
pub fn fisher_yates<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
