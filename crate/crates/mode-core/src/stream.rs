//! Deterministic RNG stream derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream keyed by
//! (root seed, domain label, index). Streams are independent of execution
//! order, so expert jobs can run in any order — or in parallel — and still
//! produce bit-identical results.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a root seed, a domain label, and an
/// index within the domain. Same inputs, same stream — on every platform.
pub fn derive_rng(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Derive a child u64 seed from a root seed. Used where a sub-stage owns its
/// own seed field (e.g. the two clustering steps) rather than an RNG.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields at least 8 bytes"))
}

/// Standard-normal draw via Box–Muller. One pair of uniforms per sample; the
/// second branch is discarded for simplicity (the cost is irrelevant here).
pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Uniforms in (0, 1]: log(0) is kept out by construction.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
