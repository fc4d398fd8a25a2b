//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a sequence of integer tags.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(seed), |acc, &t| mix64(acc ^ mix64(t)))
}

pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Stream tags, so that independent consumers of one seed never collide.
pub mod tag {
    pub const WORLD: u64 = 1;
    pub const GENE_EFFECT: u64 = 2;
    pub const MODULES: u64 = 3;
    pub const GUIDES: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const CELL: u64 = 6;
    pub const ESCAPE: u64 = 7;
    pub const RENDER: u64 = 8;
    pub const DECOYS: u64 = 9;
    pub const POSITION: u64 = 10;
    pub const SAMPLER: u64 = 11;
    pub const CROPS: u64 = 12;
    pub const INIT: u64 = 13;
    pub const CLIP_SAMPLE: u64 = 14;
}
