//! Binary checkpoint files for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "RANCKPT1"
//! count   u32      number of entries
//! entry   repeated:
//!   name_len u32
//!   name     UTF-8 bytes
//!   rows     u32
//!   cols     u32
//!   data     rows*cols f32 values, row-major
//! ```
//!
//! Values are stored as `f32` regardless of the in-memory scalar type, so a
//! model trained in one precision can be reloaded in another.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"RANCKPT1";

pub fn write_tensors<S: Scalar>(path: &Path, entries: &[(String, Tensor<S>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
        w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
        for &v in tensor.as_slice() {
            let f = v.to_f32().ok_or_else(|| {
                Error::Checkpoint(format!("value in '{name}' not representable as f32"))
            })?;
            w.write_all(&f.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_fully(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}: not a checkpoint file",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Checkpoint("unreasonable name length".into()));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_fully(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not valid UTF-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n > 0 && n <= 1 << 28)
            .ok_or_else(|| Error::Checkpoint(format!("bad shape {rows}x{cols} for '{name}'")))?;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            read_fully(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(rows, cols, data)?));
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_fully(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_fully(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint("unexpected end of file".into())
        } else {
            Error::Io(e)
        }
    })
}
