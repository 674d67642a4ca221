//! Seed derivation.
//!
//! Every command owns one root seed. Each consumer (dataset generator,
//! calibration sampler, initializer, training loop, ...) derives its own
//! stream as the first eight bytes (little-endian) of
//! `SHA-256(root_seed.to_le_bytes() || label)`, so adding a consumer never
//! shifts another consumer's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
