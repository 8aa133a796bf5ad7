//! Deterministic seed derivation. Every random stream in a run is keyed by
//! the run seed, a purpose tag, and an index, so independent consumers never
//! share or race a generator and every artifact is bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag and both numeric keys.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |byte: u8| {
        h ^= u64::from(byte);
        h = h.wrapping_mul(PRIME);
    };
    for b in tag.bytes() {
        eat(b);
    }
    for b in seed.to_le_bytes() {
        eat(b);
    }
    for b in index.to_le_bytes() {
        eat(b);
    }
    h
}

pub fn rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive(7, "world", 0), derive(7, "world", 0));
        assert_ne!(derive(7, "world", 0), derive(7, "world", 1));
        assert_ne!(derive(7, "world", 0), derive(7, "episode", 0));
        assert_ne!(derive(7, "world", 0), derive(8, "world", 0));
    }

    #[test]
    fn rngs_from_equal_keys_agree() {
        let mut a = rng(3, "x", 9);
        let mut b = rng(3, "x", 9);
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
