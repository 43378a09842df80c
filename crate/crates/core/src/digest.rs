use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    hex::encode(Sha256::digest(&bytes))
}

/// Stable 64-bit seed derived from `base` and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}
