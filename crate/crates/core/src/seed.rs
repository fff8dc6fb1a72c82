//! Stable seed derivation. Everything random in the crate is a ChaCha stream
//! keyed by a seed built here, so results do not depend on std's hasher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Order-sensitive combination of two seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(17))
}

/// Seed derived from a base seed and a textual stream name.
pub fn derive(base: u64, stream: &str) -> u64 {
    stream
        .bytes()
        .fold(splitmix64(base), |acc, b| splitmix64(acc ^ b as u64))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
