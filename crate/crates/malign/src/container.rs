//! Shared on-disk layout of checkpoints and perturbation sets:
//! `magic (8 bytes) | manifest length (u64 LE) | JSON manifest | f32 LE blob`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, IoContext, Result};

pub(crate) fn write<M: Serialize>(path: &Path, magic: &[u8; 8], manifest: &M, values: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, out).at(path)
}

/// Raw pieces of a container: the parsed manifest and the undecoded blob.
pub(crate) struct Raw<M> {
    pub manifest: M,
    pub blob: Vec<u8>,
}

pub(crate) fn read<M: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<Raw<M>> {
    let bytes = fs::read(path).at(path)?;
    if bytes.len() < 8 || &bytes[..8] != magic {
        let n = bytes.len().min(8);
        return Err(Error::BadMagic {
            path: path.into(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Header {
            path: path.into(),
            reason: "missing manifest length".into(),
        })?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| Error::Header {
        path: path.into(),
        reason: format!("manifest of {len} bytes runs past the end of the file"),
    })?;
    let manifest = serde_json::from_slice(body).map_err(|e| Error::Header {
        path: path.into(),
        reason: format!("manifest: {e}"),
    })?;
    Ok(Raw {
        manifest,
        blob: bytes[16 + len..].to_vec(),
    })
}

/// Decodes exactly `count` f32 values, reporting short and long blobs
/// as different errors.
pub(crate) fn decode(path: &Path, blob: &[u8], count: usize) -> Result<Vec<f64>> {
    let expected = 4 * count;
    if blob.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: blob.len(),
        });
    }
    if blob.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected,
            found: blob.len(),
        });
    }
    Ok(blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
