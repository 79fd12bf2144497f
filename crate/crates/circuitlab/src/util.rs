//! Seed derivation and content digests shared across modules.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// SHA-256 of raw bytes, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Derive a child seed from a parent seed and a context label.
///
/// Experiments hand out every RNG stream through this so that independent
/// stages (data generation, init, shuffling, subset draws) never share a
/// stream even when they share the master seed.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic RNG for a (seed, label) pair.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "init"), derive_seed(7, "init"));
        assert_ne!(derive_seed(7, "init"), derive_seed(7, "data"));
        assert_ne!(derive_seed(7, "init"), derive_seed(8, "init"));
    }

    #[test]
    fn sha256_known_value() {
        // Empty-input SHA-256 is a fixed constant.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
