//! Binary checkpoint container shared by VAE and supervised models.
//!
//! Layout: `b"MMVM"`, u32 version, u32 header length, UTF-8 JSON header,
//! then every parameter array as little-endian f64 in declaration order.
//! The header carries the array lengths, so the payload size is checked exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMVM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Vae,
    Supervised,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub spec: serde_json::Value,
    pub log: serde_json::Value,
    pub shapes: Vec<Vec<usize>>,
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &[Vec<f64>]) -> Result<()> {
    if header.shapes.len() != params.len()
        || header.shapes.iter().zip(params).any(|(s, p)| s.iter().product::<usize>() != p.len())
    {
        return Err(Error::contract("checkpoint shapes do not match parameter arrays"));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::contract(format!("serializing header: {e}")))?;
    let total: usize = params.iter().map(Vec::len).sum();
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in params.iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::parse(path, "not an MMVM checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::parse(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::parse(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::parse(path, format!("header: {e}")))?;
    let payload = &bytes[12 + hlen..];
    let expected: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if payload.len() != 8 * expected {
        return Err(Error::parse(
            path,
            format!("payload has {} bytes, header declares {} parameters", payload.len(), expected),
        ));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let params = header
        .shapes
        .iter()
        .map(|s| values.by_ref().take(s.iter().product()).collect())
        .collect();
    Ok((header, params))
}
