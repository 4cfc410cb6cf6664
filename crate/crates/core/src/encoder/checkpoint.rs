//! Checkpoint container.
//!
//! Layout: the 8-byte magic `MCFTCKPT`, a little-endian `u32` header length,
//! a JSON header, then the tensor blocks. Each block holds the row-major
//! little-endian values of one tensor in the header's dtype and is covered by
//! a CRC-32 recorded in the header next to its byte offset (relative to the
//! end of the header) and length.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderState, ParamMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MCFTCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    dtype: String,
    config: EncoderConfig,
    layer_mask: Vec<bool>,
    has_head: bool,
    tensors: Vec<TensorEntry>,
}

/// Writes the encoder alone.
pub fn save_checkpoint<T: Scalar>(state: &EncoderState<T>, path: &Path) -> Result<()> {
    save_model(state, None, path)
}

/// Writes the encoder and, when given, its classifier head.
pub fn save_model<T: Scalar>(state: &EncoderState<T>, head: Option<&ParamMap<T>>, path: &Path) -> Result<()> {
    state.validate()?;
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    let all = state.params.iter().chain(head.into_iter().flat_map(|h| h.iter()));
    for (name, t) in all {
        let offset = data.len();
        for &v in t.iter() {
            v.write_le(&mut data);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [t.nrows(), t.ncols()],
            offset,
            len: data.len() - offset,
            crc32: crc32fast::hash(&data[offset..]),
        });
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        dtype: T::DTYPE.to_string(),
        config: state.config.clone(),
        layer_mask: state.layer_mask.clone(),
        has_head: head.is_some(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

fn decode<T: Scalar>(bytes: &[u8], dtype: &str) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| T::c(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| T::c(f64::read_le(c))).collect()),
        other => Err(Error::Integrity(format!("unknown dtype {other}"))),
    }
}

/// Reads an encoder and its optional head. Values stored in another float
/// width are converted.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(EncoderState<T>, Option<ParamMap<T>>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Integrity(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Integrity("truncated header".into()))?;
    // Check the version before the full schema so older layouts fail cleanly.
    let raw: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::Version {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
    let data = &bytes[12 + hlen..];
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Integrity(format!("unknown dtype {other}"))),
    };

    let mut found_tensors = ParamMap::new();
    for entry in &header.tensors {
        let block = data
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| Error::Integrity(format!("tensor {} lies outside the file", entry.name)))?;
        if crc32fast::hash(block) != entry.crc32 {
            return Err(Error::Integrity(format!("checksum mismatch in tensor {}", entry.name)));
        }
        let [r, c] = entry.shape;
        if r * c * width != entry.len {
            return Err(Error::Integrity(format!("tensor {} length disagrees with its shape", entry.name)));
        }
        let values = decode::<T>(block, &header.dtype)?;
        let t = Array2::from_shape_vec((r, c), values).expect("length checked");
        found_tensors.insert(entry.name.clone(), t);
    }

    let mut params = ParamMap::new();
    for (name, _, _) in header.config.schema() {
        let t = found_tensors
            .remove(&name)
            .ok_or_else(|| Error::Integrity(format!("missing tensor {name}")))?;
        params.insert(name, t);
    }
    let head = if header.has_head {
        let mut h = ParamMap::new();
        for (name, r, c) in header.config.head_schema() {
            let t = found_tensors
                .remove(&name)
                .ok_or_else(|| Error::Integrity(format!("missing tensor {name}")))?;
            if t.dim() != (r, c) {
                return Err(Error::config(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.dim(),
                    (r, c)
                )));
            }
            h.insert(name, t);
        }
        Some(h)
    } else {
        None
    };
    if let Some(extra) = found_tensors.names().next() {
        return Err(Error::Integrity(format!("unexpected tensor {extra}")));
    }
    let state = EncoderState {
        config: header.config,
        params,
        layer_mask: header.layer_mask,
    };
    state.validate()?;
    Ok((state, head))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<EncoderState<T>> {
    load_model(path).map(|(s, _)| s)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &EncoderConfig) -> Result<EncoderState<T>> {
    let state = load_checkpoint(path)?;
    if let Some((field, want, got)) = expected.first_difference(&state.config) {
        return Err(Error::config(format!(
            "checkpoint {} has {field}={got}, expected {field}={want}",
            path.display()
        )));
    }
    Ok(state)
}
