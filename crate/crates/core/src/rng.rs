//! Deterministic seeding helpers.
//!
//! Every random draw in a run descends from the run seed. Parallel sections
//! (annotation, rollouts, evaluation) derive an independent stream per work
//! item from `(seed, label, index)` so that thread scheduling cannot change
//! results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG type used throughout.
pub type Rng = ChaCha8Rng;

/// Creates the root RNG for a run.
pub fn seed_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a seed and a label/index pair.
///
/// SplitMix64 finalizer over the combined words; cheap and well-mixed.
pub fn derive(seed: u64, label: u64, index: u64) -> Rng {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(label.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    Rng::seed_from_u64(z)
}

/// Stream labels for the independent RNG families of a run.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const TOKENIZER: u64 = 2;
    pub const BACKBONE_INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const ANNOTATE: u64 = 5;
    pub const SFT: u64 = 6;
    pub const ROLLOUT: u64 = 7;
    pub const HEADS_INIT: u64 = 8;
    pub const GRADCHECK: u64 = 9;
    pub const EVAL: u64 = 10;
}
