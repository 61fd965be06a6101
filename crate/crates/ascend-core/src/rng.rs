//! Deterministic random streams.
//!
//! Every stochastic step in the pipeline draws from a ChaCha20 stream whose
//! seed is derived from `(master seed, domain, key)` via SHA-256. Streams are
//! therefore independent of worker count, iteration order, and platform, and
//! two runs with the same master seed are bit-identical. The draw helpers
//! below avoid distribution code from external crates so the byte-level
//! behavior is pinned by this module alone.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// Derive an independent stream for `(seed, domain, key)`.
///
/// `domain` names the pipeline stage ("cohort.patient", "pretrain.mask", ...)
/// and `key` the unit of work within it (a patient id, a step number).
pub fn derive(seed: u64, domain: &str, key: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(key.as_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

/// Derive a stream keyed by an integer (steps, epochs, indices).
pub fn derive_n(seed: u64, domain: &str, n: u64) -> ChaCha20Rng {
    derive(seed, domain, &n.to_string())
}

/// Uniform in `[0, 1)` with 53 bits of precision.
pub fn unit_f64(rng: &mut ChaCha20Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, n)`. `n` must be positive.
pub fn below(rng: &mut ChaCha20Rng, n: u64) -> u64 {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as u64
}

/// Uniform integer in `[lo, hi]` (inclusive).
pub fn range_inclusive(rng: &mut ChaCha20Rng, lo: i64, hi: i64) -> i64 {
    debug_assert!(lo <= hi);
    let span = (hi - lo) as u64 + 1;
    lo + below(rng, span) as i64
}

/// Bernoulli draw.
pub fn bernoulli(rng: &mut ChaCha20Rng, p: f64) -> bool {
    unit_f64(rng) < p
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    // unit_f64 is in [0, 1); shift to (0, 1] so the log is finite.
    let u1 = 1.0 - unit_f64(rng);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Normal truncated to `mean ± 2 std`, the usual embedding init.
pub fn trunc_normal(rng: &mut ChaCha20Rng, mean: f64, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return mean + std * z;
        }
    }
}

/// Exponential with the given rate (events per unit time).
pub fn exponential(rng: &mut ChaCha20Rng, rate: f64) -> f64 {
    debug_assert!(rate > 0.0);
    -(1.0 - unit_f64(rng)).ln() / rate
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha20Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, (i + 1) as u64) as usize;
        items.swap(i, j);
    }
}

/// Derive a `u64` usable for hash-style assignment (dataset splits).
pub fn derive_u64(seed: u64, domain: &str, key: &str) -> u64 {
    derive(seed, domain, key).next_u64()
}
