//! CTEN binary tensor files.
//!
//! Layout (all multi-byte fields little-endian):
//!
//! | bytes      | field                                        |
//! |------------|----------------------------------------------|
//! | 4          | magic `CTEN`                                 |
//! | 1          | version, always 1                            |
//! | 1          | dtype: 0 = complex128, 1 = complex64         |
//! | 1          | ndim                                         |
//! | 8 * ndim   | extents as u64                               |
//! | rest       | row-major interleaved (re, im) IEEE-754      |
//!
//! Writers always emit complex128; readers accept both dtypes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, C64};

pub const MAGIC: &[u8; 4] = b"CTEN";
pub const VERSION: u8 = 1;
pub const DTYPE_C128: u8 = 0;
pub const DTYPE_C64: u8 = 1;

pub fn encode(x: &ComplexTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * x.ndim() + 16 * x.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_C128);
    out.push(x.ndim() as u8);
    for &d in x.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ComplexTensor> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 7 {
        return Err(fmt("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let width = match dtype {
        DTYPE_C128 => 8,
        DTYPE_C64 => 4,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let ndim = bytes[6] as usize;
    let header = 7 + 8 * ndim;
    if bytes.len() < header {
        return Err(fmt("truncated shape"));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let off = 7 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| fmt("dimension overflow"))?;
        numel = numel.checked_mul(d).ok_or_else(|| fmt("dimension overflow"))?;
        shape.push(d);
    }
    let payload = numel
        .checked_mul(2 * width)
        .ok_or_else(|| fmt("dimension overflow"))?;
    let body = &bytes[header..];
    if body.len() < payload {
        return Err(fmt("truncated payload"));
    }
    if body.len() > payload {
        return Err(fmt("trailing bytes after payload"));
    }
    let data = if width == 8 {
        body.chunks_exact(16)
            .map(|c| {
                C64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect()
    } else {
        body.chunks_exact(8)
            .map(|c| {
                C64::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                )
            })
            .collect()
    };
    ComplexTensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, x: &ComplexTensor) -> Result<()> {
    fs::write(path, encode(x))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ComplexTensor> {
    decode(&fs::read(path)?)
}
