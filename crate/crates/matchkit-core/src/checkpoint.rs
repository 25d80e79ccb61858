//! Training state snapshots. The binary file format lives in the `matchkit`
//! companion crate; this module only defines the state itself plus the
//! configuration hash that ties a checkpoint to the run that produced it.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::ModelParams;
use crate::math::Real;

/// Everything needed to continue a run exactly where it stopped: model
/// parameters (including batchnorm running statistics), optimizer moments,
/// the episode counter, and the sampler's rng position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Materialized configuration text of the producing run.
    pub config_text: String,
    /// FNV-1a hash of `config_text`.
    pub config_hash: u64,
    /// Completed episodes.
    pub episode: u64,
    pub params: ModelParams,
    pub adam_m: BTreeMap<String, Vec<Real>>,
    pub adam_v: BTreeMap<String, Vec<Real>>,
    pub adam_t: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
