//! `TNSR` binary tensor files.
//!
//! Layout: ASCII magic `TNSR`, `u8` version (1), `u8` rank, `rank` little-endian
//! `u32` extents, then the row-major little-endian `f32` payload.

use std::fs;
use std::path::Path;

use super::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing TNSR magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = numel(&shape);
    if bytes.len() != header + 4 * n {
        return Err(bad(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
