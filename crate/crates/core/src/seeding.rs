//! Stable seed derivation.
//!
//! Every random draw in the pipeline flows from a single root seed.
//! Sub-seeds are derived by hashing `(seed, purpose)` with FNV-1a, which
//! is stable across platforms and releases (unlike `DefaultHasher`).

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a sub-seed from a root seed and a purpose string.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + purpose.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(purpose.as_bytes());
    fnv1a64(&buf)
}

/// Derive a sub-seed keyed by a purpose string plus numeric indices.
pub fn derive_seed_indexed(seed: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut buf = Vec::with_capacity(8 + purpose.len() + 8 * indices.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(purpose.as_bytes());
    for &i in indices {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    fnv1a64(&buf)
}
