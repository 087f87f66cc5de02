use sha2::{Digest, Sha256};

fn hash_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        // Length prefix keeps ("ab", "c") distinct from ("a", "bc").
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let out = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&out);
    bytes
}

/// Stable 64-bit seed derived from an ordered list of byte strings.
pub fn seed_from(parts: &[&[u8]]) -> u64 {
    let bytes = hash_parts(parts);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// Lowercase hex SHA-256 of the ordered parts.
pub fn digest_hex(parts: &[&[u8]]) -> String {
    hash_parts(parts).iter().map(|b| format!("{b:02x}")).collect()
}
