//! "NFS1" tensor container.
//!
//! Layout: the 4 magic bytes `NFS1`, a little-endian `u32` header length,
//! a UTF-8 JSON header listing `{name, shape, offset}` per tensor (offset in
//! bytes from the start of the data section), then every tensor's values as
//! concatenated little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NfsError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NFS1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn encode_checkpoint(entries: &[CheckpointEntry]) -> Vec<u8> {
    let mut offset = 0u64;
    let header: Vec<HeaderEntry> = entries
        .iter()
        .map(|e| {
            let h = HeaderEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset,
            };
            offset += 8 * e.values.len() as u64;
            h
        })
        .collect();
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for e in entries {
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Vec<CheckpointEntry>> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(NfsError::format(origin, "missing NFS1 magic"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let data_start = 8 + header_len;
    if bytes.len() < data_start {
        return Err(NfsError::format(origin, "truncated header"));
    }
    let header: Vec<HeaderEntry> = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| NfsError::format(origin, format!("bad header: {e}")))?;
    let data = &bytes[data_start..];
    header
        .into_iter()
        .map(|h| {
            let numel: usize = h.shape.iter().product();
            let start = h.offset as usize;
            let end = start + 8 * numel;
            if end > data.len() {
                return Err(NfsError::format(origin, format!("tensor {} exceeds data section", h.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(CheckpointEntry {
                name: h.name,
                shape: h.shape,
                values,
            })
        })
        .collect()
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| NfsError::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(entries)).map_err(|e| NfsError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| NfsError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
