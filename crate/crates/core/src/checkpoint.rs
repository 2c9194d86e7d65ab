//! Single-file checkpoints: magic, header length, JSON header, then the
//! tensors as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PGCKPT01";

#[derive(Serialize, Deserialize)]
struct Envelope {
    meta: Value,
    lens: Vec<usize>,
}

/// Write atomically: the file appears only once fully written.
pub fn write(path: &Path, meta: &Value, tensors: &[Vec<f32>]) -> Result<()> {
    let env = Envelope {
        meta: meta.clone(),
        lens: tensors.iter().map(Vec::len).collect(),
    };
    let header = serde_json::to_vec(&env)?;
    let total: usize = tensors.iter().map(Vec::len).sum();
    let mut buf = Vec::with_capacity(16 + header.len() + total * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Value, Vec<Vec<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::Serde(format!("{}: {what}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let env: Envelope = serde_json::from_slice(&bytes[16..body])?;
    let total: usize = env.lens.iter().sum();
    if bytes.len() - body != total * 4 {
        return Err(corrupt("tensor data length mismatch"));
    }
    let mut floats = bytes[body..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let tensors = env.lens.iter().map(|&n| floats.by_ref().take(n).collect()).collect();
    Ok((env.meta, tensors))
}
