//! Binary checkpoint format for parameter sets.
//!
//! Layout, all little-endian: magic `DG3D`, u32 version, then per tensor a
//! u32 name length, the UTF-8 name, a u32 rank, u64 dimensions, and the f64
//! payload. Tensors appear in sorted name order, so a save/load/save cycle
//! is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numgrad::ParamSet;

const MAGIC: &[u8; 4] = b"DG3D";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    BadVersion { path: String, found: u32 },
    #[error("{path}: truncated while reading {what}")]
    Truncated { path: String, what: &'static str },
    #[error("{path}: tensor name is not valid UTF-8")]
    BadName { path: String },
    #[error("{path}: tensor '{name}' has implausible dimensions {dims:?}")]
    BadDims { path: String, name: String, dims: Vec<u64> },
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, buf) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(buf.shape.len() as u32).to_le_bytes())?;
        for &d in &buf.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &buf.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Loads every tensor; all buffers come back frozen, since trainability is a
/// runtime policy rather than part of the stored weights.
pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    let p = || path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { path: p() });
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { path: p(), found: version });
    }
    let mut params = ParamSet::new();
    loop {
        let name_len = match read_u32_opt(&mut r)? {
            Some(v) => v as usize,
            None => break,
        };
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, path, "tensor name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName { path: p() })?;
        let rank = read_u32(&mut r, path, "tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, path, "tensor dims")?;
            dims.push(u64::from_le_bytes(b));
        }
        let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        let count = match count {
            Some(c) if c <= (1 << 32) => c as usize,
            _ => return Err(CheckpointError::BadDims { path: p(), name, dims }),
        };
        let mut values = vec![0.0f64; count];
        for v in values.iter_mut() {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, path, "tensor payload")?;
            *v = f64::from_le_bytes(b);
        }
        params.insert(&name, dims.iter().map(|&d| d as usize).collect(), values, false);
    }
    Ok(params)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated {
        path: path.display().to_string(),
        what,
    })
}

fn read_u32(r: &mut impl Read, path: &Path, what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a u32 or cleanly reports end-of-file, which terminates the tensor list.
fn read_u32_opt(r: &mut impl Read) -> Result<Option<u32>, CheckpointError> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut b[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(CheckpointError::Truncated { path: String::new(), what: "tensor header" });
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}
