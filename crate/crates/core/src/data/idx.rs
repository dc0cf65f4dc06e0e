//! IDX files: `0x00 0x00`, a dtype byte, a rank byte, `rank` big-endian u32
//! dimensions, then the raw elements. Only unsigned bytes (`0x08`) are
//! accepted. Rank-1 files are label vectors and keep integer values; higher
//! ranks are images scaled to `[0, 1]`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DTYPE_U8: u8 = 0x08;

pub fn read_idx(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: PathBuf::from(path),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses IDX bytes; `path` only labels errors.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(format_err(path, 0, format!("truncated header: expected 4 bytes, {} available", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, 0, format!("bad magic {:02x} {:02x}, expected 00 00", bytes[0], bytes[1])));
    }
    if bytes[2] != DTYPE_U8 {
        return Err(format_err(path, 2, format!("unsupported dtype 0x{:02x}, only 0x08 (unsigned byte)", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(format_err(path, 3, "rank must be at least 1"));
    }
    let dims_end = 4 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(format_err(
            path,
            4,
            format!("truncated dimensions: expected {} bytes, {} available", 4 * rank, bytes.len() - 4),
        ));
    }
    let shape: Vec<usize> = bytes[4..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if let Some(i) = shape.iter().position(|&d| d == 0) {
        return Err(format_err(path, 4 + 4 * i, format!("dimension {i} is zero")));
    }
    let numel: usize = shape.iter().product();
    let avail = bytes.len() - dims_end;
    if avail < numel {
        return Err(format_err(
            path,
            dims_end,
            format!("truncated data: expected {numel} bytes, {avail} available"),
        ));
    }
    if avail > numel {
        return Err(format_err(path, dims_end + numel, format!("{} trailing bytes", avail - numel)));
    }
    let raw = &bytes[dims_end..];
    let data = if rank == 1 {
        raw.iter().map(|&b| f64::from(b)).collect()
    } else {
        raw.iter().map(|&b| f64::from(b) / 255.0).collect()
    };
    Tensor::new(shape, data)
}
