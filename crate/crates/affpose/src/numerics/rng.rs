//! Deterministic random sampling helpers.
//!
//! All randomness in the crate flows through `ChaCha8Rng` streams derived
//! from explicit seeds, so every pipeline stage is reproducible bit-for-bit
//! across runs and platforms. Gaussian variates use a hand-rolled
//! Box-Muller transform, fixed here so the byte stream -> sample mapping
//! never changes under dependency upgrades.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Scalar;

/// Mix a base seed with a stream index into a fresh 64-bit seed.
///
/// SplitMix64 finalizer; decorrelates neighbouring stream indices.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for a named sub-stream of a base seed.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// One standard normal variate via Box-Muller on two uniform draws.
///
/// Consumes exactly two `f64` draws from the generator regardless of the
/// output type, keeping `f32` and `f64` call sites stream-compatible.
pub fn standard_normal<S: Scalar, R: Rng>(rng: &mut R) -> S {
    // Guard the log: gen::<f64>() is in [0, 1); shift zero away.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    let mag = (-2.0 * u1.ln()).sqrt();
    S::from_f64(mag * (std::f64::consts::TAU * u2).cos())
}

/// Fill a slice with independent standard normal variates.
pub fn fill_standard_normal<S: Scalar, R: Rng>(rng: &mut R, out: &mut [S]) {
    for v in out.iter_mut() {
        *v = standard_normal(rng);
    }
}

/// A vector of `n` independent standard normal variates.
pub fn standard_normal_vec<S: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n];
    fill_standard_normal(rng, &mut out);
    out
}
