//! Deterministic seed splitting.
//!
//! Every random stream is derived from the single scenario seed and a fixed
//! purpose label: `splitmix64(seed ^ fnv1a(label))`. Adding a new consumer
//! never shifts the numbers drawn by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Counter-based uniform in `[0, 1)` for item `k` of a keyed sequence.
pub fn hash_uniform(key: u64, k: u64) -> f64 {
    (splitmix64(key ^ splitmix64(k)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
