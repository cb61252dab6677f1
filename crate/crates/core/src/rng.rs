//! Counter-based RNG stream derivation.
//!
//! Every random draw in a run comes from a stream keyed by the run seed and
//! the logical slot that consumes it (step, question slot, rollout index, ...),
//! so results do not depend on thread count or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes. Keeping them distinct means adding draws to one phase never
/// shifts the draws of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    QuestionSelect = 1,
    Rollout = 2,
    Resample = 3,
    Eval = 4,
    Init = 5,
    Probe = 6,
    MonteCarlo = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a key path into a 64-bit stream seed.
pub fn stream_seed(seed: u64, purpose: Purpose, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0xA0E1_5EED);
    h = splitmix64(h ^ purpose as u64);
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, purpose, keys))
}
