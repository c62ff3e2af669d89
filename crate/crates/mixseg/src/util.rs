//! Seeding and stable hashing helpers shared across the pipeline.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a over bytes; used for config/artifact fingerprints
/// that must not change across library versions.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent, reproducible rng stream for one purpose.
/// Different labels give unrelated streams for the same seed.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(label.as_bytes()).to_le_bytes());
    let mix = fnv1a64(&key[..16]);
    key[16..24].copy_from_slice(&mix.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
