//! Deterministic random streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(master_seed, purpose, round, index)`. Streams never depend on the order in
//! which clients are scheduled, so parallel and serial executions agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    LocalTrain = 1,
    Selection = 2,
    ServerPartition = 3,
    ServerRefine = 4,
    Task = 5,
    Init = 6,
    Data = 7,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit seed.
pub fn derive_seed(master: u64, words: &[u64]) -> u64 {
    words.iter().fold(mix(master), |acc, &w| mix(acc ^ mix(w)))
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPolicy {
    pub master_seed: u64,
}

impl RngPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn seed(&self, purpose: Purpose, round: u64, index: u64) -> u64 {
        derive_seed(self.master_seed, &[purpose as u64, round, index])
    }

    pub fn stream(&self, purpose: Purpose, round: u64, index: u64) -> StreamRng {
        rng_from_seed(self.seed(purpose, round, index))
    }

    /// A child policy for an independent sub-experiment (e.g. one downstream task).
    pub fn child(&self, purpose: Purpose, index: u64) -> RngPolicy {
        RngPolicy::new(self.seed(purpose, 0, index))
    }
}
