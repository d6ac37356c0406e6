//! Configuration fingerprinting and deterministic seed fan-out.
//!
//! Every training artifact records a hash of the exact configuration that
//! produced it, so stale checkpoints are detected instead of silently reused.
//! Subsystems that need independent random streams derive their seeds from
//! one master seed plus a label, which keeps runs reproducible without
//! threading a single RNG through every module.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SHA-256 hex digest of a configuration's JSON form. Field order comes from
/// the struct definition, so equal configs hash equally across runs.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)
        .map_err(|e| Error::msg(format!("configuration does not serialize: {e}")))?;
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// Derive a per-subsystem seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
