use sha2::{Digest, Sha256};

/// Derives an independent, labeled seed from a root seed so that every
/// consumer of randomness (init, shuffle, dropout, synthetic data) gets its
/// own stream.
pub fn sub_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
