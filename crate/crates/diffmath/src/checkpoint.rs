//! Flat parameter checkpoints.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic   b"RDMC"
//! u32     version (= 1)
//! u32     record count
//! per record:
//!   u32        name length in bytes, then UTF-8 name
//!   u32        rank, then rank × u64 dimensions
//!   f64 × n    values, row-major, n = product of dimensions
//! ```
//!
//! A JSON index written next to the binary lists every record with its
//! shape, the byte offset of its first value and its value count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{MathError, ParamStore, Result, Tensor};

const MAGIC: &[u8; 4] = b"RDMC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub version: u32,
    pub records: Vec<CheckpointRecord>,
}

/// Writes `store` to `bin_path` and its index to `index_path`.
pub fn save_checkpoint(store: &ParamStore, bin_path: &Path, index_path: &Path) -> Result<CheckpointIndex> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut records = Vec::with_capacity(store.len());
    for (_, name, tensor) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        records.push(CheckpointRecord {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: buf.len() as u64,
            count: tensor.numel() as u64,
        });
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        format: "reed-diffmath-checkpoint".into(),
        version: VERSION,
        records,
    };
    fs::write(bin_path, &buf)?;
    fs::write(index_path, serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| MathError::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads every `(name, tensor)` record from a binary checkpoint.
pub fn load_checkpoint(bin_path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(bin_path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(MathError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MathError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| MathError::Checkpoint(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(MathError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}
