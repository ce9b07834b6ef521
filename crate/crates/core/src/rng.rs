//! Seed derivation. Every random stream is a ChaCha8 generator keyed by a
//! SplitMix64 mix of the global seed and a list of stream ids, so streams are
//! independent of evaluation order and identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, ids: &[u64]) -> u64 {
    ids.iter()
        .fold(splitmix64(seed), |acc, &id| splitmix64(acc ^ splitmix64(id)))
}

pub fn stream(seed: u64, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, ids))
}

// Stream tags.
pub const TAG_SCENE: u64 = 1;
pub const TAG_VOCAB: u64 = 2;
pub const TAG_INIT: u64 = 3;
pub const TAG_NOISE: u64 = 4;
pub const TAG_SHUFFLE: u64 = 5;
pub const TAG_DROPOUT: u64 = 6;
