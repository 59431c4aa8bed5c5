//! Seed derivation and shared sampling helpers.
//!
//! Every stochastic component takes an explicit `u64` seed and builds a
//! `ChaCha8Rng` from it, so identical seeds reproduce identical byte streams
//! regardless of call order elsewhere in the program.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent child seed from a base seed and a stream index.
///
/// SplitMix64 finalizer; cheap, well distributed, and stable across releases.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample over a disc of the given radius centered at the origin.
pub fn sample_disc(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let theta = std::f64::consts::TAU * rng.gen::<f64>();
    (r * theta.cos(), r * theta.sin())
}
