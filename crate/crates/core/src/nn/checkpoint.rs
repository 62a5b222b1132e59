//! `params.bin`: name-sorted tensors, little-endian `f32`.
//!
//! ```text
//! magic  b"CLNPPARM"
//! u32    tensor count
//! per tensor (ascending name order):
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u32 × rank dims
//!   f32 × product(dims)
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLNPPARM";

pub fn encode_params(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8], store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
    let bad = |reason: &str| Error::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.to_string() };
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let count = r.u32().ok_or_else(|| bad("truncated header"))?;
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| bad("truncated name length"))? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated name"))?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(|| bad("truncated dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4).ok_or_else(|| bad(&format!("truncated data for {name}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(&name, Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(())
}

pub fn write_params(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_params(store)).map_err(|e| Error::io(path, e))
}

/// Read tensors into `store`, replacing same-named entries.
pub fn read_params(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, store, path)
}
