// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint file format.
//!
//! ```text
//! "RFTC"                 4 bytes magic
//! version                u32 little-endian (currently 1)
//! header_len             u32 little-endian
//! header                 header_len bytes of UTF-8 JSON:
//!                        { "config": ModelConfig,
//!                          "tensors": [{ "name", "shape", "dtype": "f32", "offset" }] }
//! blobs                  little-endian f32, row-major; `offset` is in bytes
//!                        from the first byte after the header
//! ```
//!
//! Values are stored as `f32`; loading widens them back to `f64`, so
//! `save(load(save(m)))` is byte-identical to `save(m)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameters};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"RFTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Serializes the model to checkpoint bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in model.params.tensors() {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(Error::Manifest(format!("file of {} bytes is too short for a header", bytes.len())));
    }
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[..4]);
    if &found != MAGIC {
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < 12 {
        return Err(Error::Manifest("truncated before header length".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Manifest(format!("header of {header_len} bytes runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[12..body])
        .map_err(|e| Error::Manifest(format!("unreadable header JSON: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::Manifest(format!("invalid config: {e}")))?;
    let blob = &bytes[body..];

    let expected = Parameters::expected_shapes(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(Error::Manifest(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Manifest(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Manifest(format!("tensor {name} has dtype {}, expected f32", entry.dtype)));
        }
        let count: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(count * 4)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| Error::Manifest(format!("tensor {name} data runs past end of file")))?;
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        tensors.push(Tensor::from_vec(shape, data).map_err(|e| Error::Manifest(e.to_string()))?);
    }

    let config = header.config;
    let mut params = Parameters::init(&ModelConfig {
        seed: 0,
        ..config.clone()
    })?;
    for (slot, t) in params.tensors_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    if !params.is_finite() {
        return Err(Error::Manifest("checkpoint contains non-finite weights".into()));
    }
    Ok(Model { config, params })
}

/// `save_checkpoint`
pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `load_checkpoint`; also the import path for externally produced weights.
pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
