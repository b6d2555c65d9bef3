//! Content digests over canonical JSON.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes through `serde_json::Value`, whose maps keep keys sorted, so
/// field order in the source struct does not affect the digest.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config types serialize");
    serde_json::to_string(&v).expect("value serializes")
}

/// Hex SHA-256 of [`canonical_json`].
pub fn config_digest<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}
