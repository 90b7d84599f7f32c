use sha2::{Digest, Sha256};

/// First eight bytes of SHA-256, little-endian.
pub fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
