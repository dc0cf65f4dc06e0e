//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IMSTYCKPT1"
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f64 data
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 10] = b"IMSTYCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

pub fn write_checkpoint(mut w: impl Write, tensors: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for nt in tensors {
        let name = nt.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(nt.tensor.rank() as u32).to_le_bytes())?;
        for &d in nt.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in nt.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, tensors).map_err(|e| Error::io(&tmp, e))?;
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(self.err(format!("truncated {what}: expected {n} bytes, {avail} available")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.err("bad magic, not an IMSTYCKPT1 checkpoint"));
    }
    let count = cur.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let raw_name = cur.take(name_len, "name")?;
        let Ok(name) = std::str::from_utf8(raw_name).map(str::to_string) else {
            cur.pos -= name_len;
            return Err(cur.err("tensor name is not UTF-8"));
        };
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        if shape.contains(&0) {
            return Err(cur.err(format!("tensor `{name}` has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(NamedTensor::new(name, Tensor::from_parts(shape, data)));
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}
