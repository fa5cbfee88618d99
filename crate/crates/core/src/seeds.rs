//! Seed derivation. Every random choice in a run descends from the run's
//! single `rng_seed` through named substreams.

use sha2::{Digest, Sha256};

/// Hashes length-prefixed parts into a 64-bit seed. Prefixing keeps
/// `("ab", "c")` and `("a", "bc")` apart.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for the named substream (`"generation"`, `"selection"`, ...).
pub fn substream(seed: u64, name: &str) -> u64 {
    derive_seed(&[&seed.to_le_bytes(), name.as_bytes()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_are_length_prefixed() {
        assert_ne!(derive_seed(&[b"ab", b"c"]), derive_seed(&[b"a", b"bc"]));
        assert_eq!(derive_seed(&[b"x"]), derive_seed(&[b"x"]));
    }

    #[test]
    fn substreams_differ() {
        assert_ne!(substream(7, "generation"), substream(7, "selection"));
        assert_ne!(substream(7, "generation"), substream(8, "generation"));
    }
}
