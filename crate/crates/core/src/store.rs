//! Raw little-endian float32 record files and JSON manifests.
//!
//! Every persisted array in the crate (embedding cache entries, noun banks,
//! model checkpoints) uses the same convention: one `.f32` file holding the
//! values back to back, with its length and SHA-256 checksum kept in a JSON
//! manifest next to it.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `values` and returns the checksum of the written bytes.
pub fn write_f32(path: &Path, values: &[f32]) -> Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = f32_bytes(values);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(checksum(&bytes))
}

/// Reads a record, verifying length and checksum. Failures are reported as a
/// plain reason string so callers can attach their own context.
pub fn read_f32_checked(
    path: &Path,
    expected_len: usize,
    expected_checksum: &str,
) -> std::result::Result<Vec<f32>, String> {
    let bytes = fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    if bytes.len() != expected_len * 4 {
        return Err(format!(
            "length mismatch: manifest says {expected_len} values, file holds {} bytes",
            bytes.len()
        ));
    }
    let actual = checksum(&bytes);
    if actual != expected_checksum {
        return Err(format!(
            "checksum mismatch: manifest {expected_checksum}, file {actual}"
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// First eight bytes of SHA-256(`text`) as a little-endian u64.
pub fn hash_seed(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_record_roundtrip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.f32");
        let values = [1.5f32, -0.25, f32::MIN_POSITIVE];
        let sum = write_f32(&path, &values).unwrap();
        assert_eq!(read_f32_checked(&path, 3, &sum).unwrap(), values);
        assert!(read_f32_checked(&path, 2, &sum).is_err());
        assert!(read_f32_checked(&path, 3, "00").is_err());
    }

    #[test]
    fn hash_seed_is_stable() {
        assert_eq!(hash_seed("abc"), hash_seed("abc"));
        assert_ne!(hash_seed("abc"), hash_seed("abd"));
    }
}
