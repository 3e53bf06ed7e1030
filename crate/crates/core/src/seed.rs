//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a master seed plus a stream tag, so independent consumers never
//! share state and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Validation = 3,
    Edges = 4,
    Mask = 5,
    Folds = 6,
    Pool = 7,
    Baseline = 8,
    Network = 9,
    Field = 10,
    Reports = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with any number of discriminators.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, &[stream as u64]))
}

pub fn rng_with(seed: u64, stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    let mut all = vec![stream as u64];
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(derive(seed, &all))
}
