//! Tensor interchange file: a JSON manifest followed by a raw blob of
//! little-endian IEEE-754 f32 values, row-major.
//!
//! Layout: `u64 LE manifest length | manifest JSON | blob`. The manifest
//! lists each tensor's name, shape, dtype, and byte offset into the blob.
//! Checkpoint conversion happens outside this crate; this format is the
//! hand-off point.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const TENSOR_FILE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorManifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

/// Write named matrices; values are narrowed to f32.
pub fn write_tensors(path: &Path, tensors: &[(String, &Matrix)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            dtype: "f32".to_string(),
            offset: blob.len() as u64,
        });
        for &v in m.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = TensorManifest {
        version: TENSOR_FILE_VERSION,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(&(json.len() as u64).to_le_bytes())?;
    file.write_all(&json)?;
    file.write_all(&blob)?;
    Ok(())
}

/// Read every tensor in file order as (name, matrix) pairs.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    if bytes.len() < 8 {
        return Err(Error::Integrity(
            "tensor file shorter than its header".into(),
        ));
    }
    let json_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + json_len {
        return Err(Error::Integrity("tensor file manifest truncated".into()));
    }
    let manifest: TensorManifest = serde_json::from_slice(&bytes[8..8 + json_len])
        .map_err(|e| Error::Integrity(format!("manifest parse: {e}")))?;
    if manifest.version != TENSOR_FILE_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported tensor file version {}",
            manifest.version
        )));
    }
    let blob = &bytes[8 + json_len..];

    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Integrity(format!(
                "tensor '{}' has unsupported dtype '{}'",
                entry.name, entry.dtype
            )));
        }
        let count = entry.rows * entry.cols;
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::Integrity(format!(
                "tensor '{}' extends past the blob",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let m = Matrix::from_vec(entry.rows, entry.cols, data)?;
        out.push((entry.name.clone(), m));
    }
    Ok(out)
}

/// Fetch a single tensor by name.
pub fn find_tensor(tensors: &[(String, Matrix)], name: &str) -> Option<Matrix> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m.clone())
}
