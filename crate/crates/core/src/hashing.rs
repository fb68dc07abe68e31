//! Stable 64-bit hashing shared by feature hashing and RNG stream derivation.
//!
//! Everything here is platform independent: inputs are folded as little-endian
//! words, so the same tuple hashes identically on every target.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Hash an ordered tuple of words.
#[inline]
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for &w in words {
        h = mix64(h ^ w).wrapping_add(FNV_PRIME);
    }
    mix64(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values_are_stable() {
        // Frozen outputs; a change here silently reshuffles every checkpoint.
        assert_eq!(hash_str(""), FNV_OFFSET);
        assert_eq!(hash_str("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(mix64(0), 0);
        assert_ne!(hash_words(&[1, 2]), hash_words(&[2, 1]));
    }
}
