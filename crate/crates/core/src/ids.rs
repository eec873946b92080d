//! Content-derived identifiers.
//!
//! Pipeline outputs must be byte-reproducible, so every id produced by the
//! pipeline is a truncated SHA-256 over length-prefixed parts.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `prefix-` followed by 16 hex digits of SHA-256 over `parts`.
pub fn derived_id(prefix: &str, parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    format!("{prefix}-{}", hex::encode(&digest[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_prefix_separates_parts() {
        assert_ne!(derived_id("x", &[b"ab", b"c"]), derived_id("x", &[b"a", b"bc"]));
        assert_eq!(derived_id("pg", &[b"a"]).len(), "pg-".len() + 16);
    }
}
