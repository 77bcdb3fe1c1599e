//! Deterministic seed derivation.
//!
//! Every source of randomness in the workspace is a [`ChaCha8Rng`] seeded
//! either directly by a caller-provided seed or by [`derive_seed`], which
//! stretches one global seed into independent per-purpose streams. Purpose
//! strings are dotted paths such as `"train.batches"` or
//! `"stability.b256.r3"`; they are part of each command's observable contract
//! so reruns are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent sub-seed from a global seed and a purpose label.
///
/// The derivation is the first eight little-endian bytes of
/// `SHA-256(seed_le || purpose)`; it is stable across platforms and releases.
pub fn derive_seed(global_seed: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Seeded generator for one named purpose.
pub fn rng_for(global_seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global_seed, purpose))
}

/// Hex digest of arbitrary bytes; used for content hashes and score-source
/// fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        write!(out, "{b:02x}").expect("writing to string cannot fail");
    }
    out
}
