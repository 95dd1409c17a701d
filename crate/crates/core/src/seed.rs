//! Deterministic seed derivation so that every random draw in a run is a
//! pure function of the master seed and its position in the run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of integers (round, client, stream tag, ...).
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(base, path))
}

// stream tags
pub const STREAM_SAMPLING: u64 = 1;
pub const STREAM_LOCAL: u64 = 2;
pub const STREAM_POPULATION: u64 = 3;
pub const STREAM_PARTITION: u64 = 4;
pub const STREAM_DATASET: u64 = 5;
pub const STREAM_BASIS: u64 = 6;
