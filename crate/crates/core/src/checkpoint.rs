//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"MUGVCKPT" | u64 LE header length | UTF-8 JSON header | raw payload
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, offset, length}` with
//! offsets relative to the start of the payload. Metadata lives under the
//! reserved `__metadata__` key. Keys are serialized in sorted order and the
//! payload is written in the same order, so identical parameter sets always
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{NamedTensor, ParameterSet, TensorData};

pub const MAGIC: &[u8; 8] = b"MUGVCKPT";
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a MUGV checkpoint")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("overlapping tensor payloads: `{first}` and `{second}`")]
    Overlap { first: String, second: String },
    #[error("tensor `{name}`: payload length {length} does not match dtype/shape ({expected} bytes)")]
    LengthMismatch {
        name: String,
        length: u64,
        expected: u64,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype `{0}`")]
    Dtype(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

fn elem_size(dtype: &str) -> Result<u64, CheckpointError> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(CheckpointError::Dtype(other.to_string())),
    }
}

/// Serializes a parameter set into checkpoint bytes.
pub fn to_bytes(params: &ParameterSet) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    if !params.metadata.is_empty() {
        let meta: serde_json::Map<String, serde_json::Value> = params
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), serde_json::Value::Object(meta));
    }
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let offset = payload.len() as u64;
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        }
        let entry = TensorEntry {
            dtype: t.data.dtype_name().to_string(),
            shape: t.shape.clone(),
            offset,
            length: payload.len() as u64 - offset,
        };
        header.insert(
            name.clone(),
            serde_json::to_value(entry).expect("entry serializes"),
        );
    }
    // serde_json::Map is a BTreeMap without `preserve_order`, so keys come out sorted.
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out
}

/// Parses the header of checkpoint bytes without decoding payloads.
pub fn read_header(bytes: &[u8]) -> Result<(BTreeMap<String, TensorEntry>, BTreeMap<String, String>, usize), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| CheckpointError::Truncated("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated(format!(
            "header needs {header_len} bytes, file has {}",
            bytes.len() - 16
        )));
    }
    let raw: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut entries = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for (k, v) in raw {
        if k == METADATA_KEY {
            metadata = serde_json::from_value(v).map_err(|e| CheckpointError::Header(e.to_string()))?;
        } else {
            let entry: TensorEntry =
                serde_json::from_value(v).map_err(|e| CheckpointError::Header(format!("`{k}`: {e}")))?;
            entries.insert(k, entry);
        }
    }
    Ok((entries, metadata, header_end))
}

/// Decodes checkpoint bytes, validating magic, offsets and lengths.
pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet, CheckpointError> {
    let (entries, metadata, payload_start) = read_header(bytes)?;
    let payload = &bytes[payload_start..];

    for (name, e) in &entries {
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        let expected = numel * elem_size(&e.dtype)?;
        if e.length != expected {
            return Err(CheckpointError::LengthMismatch {
                name: name.clone(),
                length: e.length,
                expected,
            });
        }
        let end = e.offset.checked_add(e.length);
        if end.is_none_or(|end| end > payload.len() as u64) {
            return Err(CheckpointError::Truncated(format!(
                "tensor `{name}` spans [{}, {}) but payload has {} bytes",
                e.offset,
                e.offset.saturating_add(e.length),
                payload.len()
            )));
        }
    }

    let mut spans: Vec<(&String, u64, u64)> = entries
        .iter()
        .filter(|(_, e)| e.length > 0)
        .map(|(k, e)| (k, e.offset, e.offset + e.length))
        .collect();
    spans.sort_by_key(|&(_, start, _)| start);
    for w in spans.windows(2) {
        if w[1].1 < w[0].2 {
            return Err(CheckpointError::Overlap {
                first: w[0].0.clone(),
                second: w[1].0.clone(),
            });
        }
    }

    let mut params = ParameterSet::new();
    params.metadata = metadata;
    for (name, e) in entries {
        let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let data = match e.dtype.as_str() {
            "f32" => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            _ => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        let tensor = NamedTensor::new(e.shape, data).map_err(|err| CheckpointError::Header(err.to_string()))?;
        params.insert(name, tensor);
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParameterSet, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet, CheckpointError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}
