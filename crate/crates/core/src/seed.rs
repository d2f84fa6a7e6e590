//! Stable hashing and seed derivation.
//!
//! Everything that must be reproducible across processes (world hashes,
//! embedder fingerprints, per-episode seeds) goes through SHA-256 so the
//! result never depends on `std`'s randomized hasher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Full SHA-256 digest of `bytes` as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 8 bytes of SHA-256 over the concatenation of `parts`, each
/// length-prefixed so that `["ab", "c"]` and `["a", "bc"]` differ.
pub fn hash64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Derives a child seed from a parent seed and a label path.
pub fn derive(seed: u64, labels: &[&str]) -> u64 {
    let seed_bytes = seed.to_le_bytes();
    let mut parts: Vec<&[u8]> = Vec::with_capacity(labels.len() + 1);
    parts.push(&seed_bytes);
    parts.extend(labels.iter().map(|l| l.as_bytes()));
    hash64(&parts)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
