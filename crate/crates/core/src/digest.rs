//! SHA-256 helpers used for cache keys, synthetic embeddings and
//! order-independent pseudo-random draws.

use sha2::{Digest, Sha256};

/// Hashes `parts` with length prefixes so that part boundaries matter.
pub fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    hex::encode(sha256_parts(parts))
}

/// Hex digest of a text on its own; the key used by embedding tables.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Uniform draw in `[0, 1)` derived from `parts`.
pub fn unit_interval(parts: &[&[u8]]) -> f64 {
    let d = sha256_parts(parts);
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_matter() {
        assert_ne!(sha256_parts(&[b"ab", b"c"]), sha256_parts(&[b"a", b"bc"]));
    }

    #[test]
    fn unit_interval_in_range() {
        for i in 0u32..1000 {
            let u = unit_interval(&[&i.to_le_bytes()]);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
