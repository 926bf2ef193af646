//! `NCT1` tensor files: magic, `u8` rank, `u32` extents, then `f32` values, all little-endian.
//!
//! A file may hold several records back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"NCT1";

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::dim("tensor rank exceeds 255"))?;
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&[rank])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::dim("tensor extent exceeds u32"))?;
        out.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Parses every record in `bytes`.
pub fn decode_tensors<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Vec<Tensor<T>>> {
    let mut pos = 0usize;
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
        match end {
            Some(end) => {
                let s = &bytes[*pos..end];
                *pos = end;
                Ok(s)
            }
            None => Err(Error::format(origin, "truncated tensor record")),
        }
    };
    while pos < bytes.len() {
        if take(&mut pos, 4)? != TENSOR_MAGIC {
            return Err(Error::format(origin, "bad tensor magic"));
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = take(&mut pos, 4)?;
            shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        out.push(Tensor::new(shape, data).map_err(|e| Error::format(origin, e.to_string()))?);
    }
    Ok(out)
}

pub fn save_tensors<T: Scalar>(path: &Path, tensors: &[Tensor<T>]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        write_tensor(&mut buf, t)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<Vec<Tensor<T>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensors(&bytes, path)
}
