//! Hierarchical seed derivation.
//!
//! Every random object in the crate is generated from its own 64-bit seed,
//! derived from a parent seed and an index with [`derive_seed`]. The chain
//! used by the experiment driver is `master -> trial -> stream -> block`, so
//! results do not depend on the order in which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `index` under `parent`.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index).rotate_left(23))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream indices used under a trial seed.
pub mod stream {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const KMEANS: u64 = 2;
    pub const SKETCH_BASE: u64 = 100;
}
