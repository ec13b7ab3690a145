//! MMTF tensor files.
//!
//! Layout: `b"MMTF"`, `u32` version (1), `u32` ndim, `ndim × u64` dims, then
//! `product(dims) × f32`, all little-endian, values row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MMTF_MAGIC: &[u8; 4] = b"MMTF";
pub const MMTF_VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MMTF_MAGIC)?;
    w.write_all(&MMTF_VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.ndim() + 4 * t.numel());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> std::result::Result<(), String> {
    r.read_exact(buf).map_err(|e| format!("truncated {what}: {e}"))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor. Errors are returned as messages so callers can attach a path.
pub fn read_tensor<R: Read>(r: &mut R) -> std::result::Result<Tensor, String> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MMTF_MAGIC {
        return Err(format!("bad magic {magic:?}, expected \"MMTF\""));
    }
    let version = read_u32(r, "version")?;
    if version != MMTF_VERSION {
        return Err(format!("unsupported MMTF version {version}"));
    }
    let ndim = read_u32(r, "ndim")? as usize;
    if ndim == 0 || ndim > 16 {
        return Err(format!("unreasonable ndim {ndim}"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "dims")?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("invalid dims {shape:?}"))?;
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes, "values")?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let t = read_tensor(&mut r).map_err(|msg| Error::format(path, msg))?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::format(path, "trailing bytes after tensor")),
        Err(e) => Err(Error::io(path, e)),
    }
}
