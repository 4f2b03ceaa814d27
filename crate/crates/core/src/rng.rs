//! Seed derivation. Every random stream in the simulator is a `ChaCha8Rng`
//! keyed by a tuple of integers, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Name of the generator recorded in normalized configs.
pub const RNG_ALGORITHM: &str = "chacha8";

// Stream tags.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_PARTICIPANTS: u64 = 3;
pub const STREAM_DATA: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;
pub const STREAM_MATCH: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(parts))
}

/// Plain `seed_from_u64` stream, used where the seed itself is prescribed
/// (label permutations use `global_seed + client_id`).
pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
