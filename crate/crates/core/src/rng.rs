//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator built by
//! [`stream`]: the seed is expanded with `seed_from_u64` and the ChaCha
//! stream id selects an independent sub-sequence. Using distinct stream ids
//! for covariates, treatment noise and outcome noise keeps those draws
//! independent of each other while staying bit-reproducible on every
//! platform.
//!
//! Sub-seeds for pipeline stages come from [`derive_seed`], a SplitMix64
//! finalizer applied to the master seed xor an FNV-1a hash of a stage label.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Stream ids used throughout the crate.
pub mod streams {
    pub const COVARIATES: u64 = 1;
    pub const TREATMENT: u64 = 2;
    pub const OUTCOME_NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
    pub const RANDOM_ABLATION: u64 = 7;
    /// Epoch `e` shuffles with stream `SHUFFLE_BASE + e`.
    pub const SHUFFLE_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded train/held-out split of `0..n`: the held-out part takes the first
/// `round(n · held_out_fraction)` entries (at least one, and never all when
/// `n > 1`) of a permutation drawn from the `SPLIT` stream.
pub fn train_test_split(n: usize, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, streams::SPLIT));
    let n_out = libm::round(n as f64 * held_out_fraction) as usize;
    let n_out = n_out.clamp(1, n.saturating_sub(1).max(1));
    let held_out = idx[..n_out].to_vec();
    let train = idx[n_out..].to_vec();
    (train, held_out)
}

/// Derives the seed for a named pipeline stage from a master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a(label))
}
