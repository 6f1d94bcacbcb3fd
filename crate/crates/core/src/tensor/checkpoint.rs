//! Checkpoint file format.
//!
//! Layout: magic `DMCK`, u32 LE version, u32 LE header length, JSON header,
//! then one raw little-endian f32 blob per parameter. The header carries the
//! format version, an arbitrary JSON model-config blob and a manifest of
//! `name -> {shape, offset}` entries; offsets are byte positions relative to
//! the start of the blob section. Parameters are written in name order, so
//! identical stores serialize to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::ParamStore;
use crate::error::{DmError, Result};

pub const MAGIC: &[u8; 4] = b"DMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

pub fn save(path: &Path, store: &ParamStore<f32>, model_config: &serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, p) in store.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: [p.rows, p.cols],
            offset,
        });
        offset += (p.data.len() * 4) as u64;
    }
    let header = Header {
        format_version: VERSION,
        model_config: model_config.clone(),
        params: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, p) in store.iter() {
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the parameter store and the model-config JSON stored alongside.
pub fn load(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let bad = |reason: &str| DmError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic, expected DMCK"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut store = ParamStore::new();
    for entry in &header.params {
        let [rows, cols] = entry.shape;
        let numel = rows * cols;
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(bad(&format!("parameter {} overruns blob", entry.name)));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DmError::NonFinite(format!("checkpoint parameter {}", entry.name)));
        }
        store.insert(&entry.name, rows, cols, data);
    }
    Ok((store, header.model_config))
}
