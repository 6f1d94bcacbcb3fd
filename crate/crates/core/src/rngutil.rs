//! Seeded randomness helpers. Everything downstream derives its stream from
//! a `(seed, stream)` pair so independent stages never share draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream for a given stage of a run.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal via Box-Muller; two uniforms per draw keeps the stream
/// layout independent of any library's ziggurat tables.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draw from an explicit probability vector (must sum to ~1).
pub fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let mut dart = rng.random::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}
