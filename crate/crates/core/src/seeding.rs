//! Deterministic seed derivation.
//!
//! Every source of randomness in the pipeline is a ChaCha8 stream keyed by a
//! master seed plus a stream index, so independent workers (one per patient,
//! one per rollout) draw from disjoint deterministic streams regardless of
//! scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby (seed, stream) pairs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed from a master seed and a stream index.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

/// A ChaCha8 generator for the given (master, stream) pair.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

/// Stream indices reserved by the pipeline. Indexed families (patients,
/// rollouts) occupy `BASE + i` and the bases are spaced far apart.
pub mod streams {
    /// Cohort split shuffle.
    pub const SPLIT: u64 = 1;
    /// Replay-buffer sampling during training.
    pub const REPLAY: u64 = 2;
    /// Network weight initialization.
    pub const INIT: u64 = 3;
    /// Minibatch assembly order (stratified segment jitter).
    pub const BATCH: u64 = 4;
    /// Synthetic patient `i` draws from `PATIENT_BASE + i`.
    pub const PATIENT_BASE: u64 = 1 << 32;
    /// Evaluation rollout `i` draws from `ROLLOUT_BASE + i`.
    pub const ROLLOUT_BASE: u64 = 2 << 32;
}
