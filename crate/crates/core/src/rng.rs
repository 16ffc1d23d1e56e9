//! Seed handling.
//!
//! Every random draw in the crate goes through a `ChaCha8Rng` seeded from a
//! `u64`. Child seeds for independent tasks (layers, trials, sample blocks)
//! are derived by folding a path of counters into the root seed with the
//! SplitMix64 finalizer: `derive(root, &[point, trial, stream])`. The same
//! path always yields the same child seed, and distinct paths give
//! statistically independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream tags so call sites don't collide on small integers.
pub mod stream {
    pub const LABELS: u64 = 0x4c41_4245;
    pub const COVARIATES: u64 = 0x434f_5641;
    pub const NETWORK: u64 = 0x4e45_5457;
    pub const GAUSS_EQUIV: u64 = 0x475a_4551;
    pub const BP_INIT: u64 = 0x4250_494e;
    pub const MONTE_CARLO: u64 = 0x4d43_4d43;
    pub const SPECTRAL: u64 = 0x5350_4543;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child(root: u64, path: &[u64]) -> Rng {
    rng(derive(root, path))
}
