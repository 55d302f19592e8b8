//! Seed derivation. Every random stream is a pure function of a root seed
//! and a label, so stages never share or reorder randomness.

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

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(root: u64, label: &str) -> ChaCha8Rng {
    rng(derive_seed(root, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_eq!(derive_seed(7, "corpus"), derive_seed(7, "corpus"));
        assert_ne!(derive_seed(7, "corpus"), derive_seed(7, "model"));
        assert_ne!(derive_seed(7, "corpus"), derive_seed(8, "corpus"));
    }
}
