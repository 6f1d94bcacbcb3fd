//! Feature bank: a flat file of float32 rows.
//!
//! Layout, all little-endian: magic `DMFB`, u32 version, u32 row count,
//! u32 dim, then `count * dim` f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DmError, Result};

pub const MAGIC: &[u8; 4] = b"DMFB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub dim: usize,
    data: Vec<f32>,
}

impl FeatureBank {
    pub fn new(dim: usize) -> Self {
        FeatureBank { dim, data: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    /// Append one row, returning its row index.
    pub fn push(&mut self, row: &[f32]) -> Result<u32> {
        if row.len() != self.dim {
            return Err(DmError::Shape { op: "bank push", lhs: (1, row.len()), rhs: (1, self.dim) });
        }
        let idx = self.rows() as u32;
        self.data.extend_from_slice(row);
        Ok(idx)
    }

    pub fn row(&self, idx: u32) -> Result<&[f32]> {
        let idx = idx as usize;
        if idx >= self.rows() {
            return Err(DmError::Config(format!("bank row {idx} out of {}", self.rows())));
        }
        Ok(&self.data[idx * self.dim..(idx + 1) * self.dim])
    }

    pub fn rows_range(&self, start: u32, count: u32) -> Result<&[f32]> {
        let (start, count) = (start as usize, count as usize);
        if start + count > self.rows() {
            return Err(DmError::Config(format!(
                "bank rows [{start}, {}) out of {}",
                start + count,
                self.rows()
            )));
        }
        Ok(&self.data[start * self.dim..(start + count) * self.dim])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |reason: String| DmError::Format { path: path.display().to_string(), reason };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic, expected DMFB".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut bytes = vec![0u8; count * dim * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FeatureBank { dim, data })
    }
}
