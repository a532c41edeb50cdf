//! Deterministic RNG streams keyed by task identity.
//!
//! Every generation task draws from its own stream derived from the global seed and the task
//! key, so results do not depend on how tasks are scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `global` with a splitmix64 chain.
pub fn derive_seed(global: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(global), |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

pub fn stream(global: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, parts))
}
