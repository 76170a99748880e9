//! STF1 tensor file format.
//!
//! Layout: magic "STF1", u8 element kind (0 = real32, 1 = complex64),
//! u8 rank, rank little-endian u32 extents, then raw little-endian f32
//! values (complex interleaved).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ElemKind, Tensor};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"STF1";

pub fn write_stf<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    let kind = match t.kind() {
        ElemKind::Real32 => 0u8,
        ElemKind::Complex64 => 1u8,
    };
    w.write_all(&[kind])?;
    let rank = t.shape().len();
    if rank > u8::MAX as usize {
        return Err(CoreError::format(format!("rank {} too large for STF1", rank)));
    }
    w.write_all(&[rank as u8])?;
    for &e in t.shape() {
        if e > u32::MAX as usize {
            return Err(CoreError::format(format!("extent {} exceeds u32", e)));
        }
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_stf<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::format(format!(
            "bad magic {:?}, expected \"STF1\"",
            magic
        )));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let kind = match head[0] {
        0 => ElemKind::Real32,
        1 => ElemKind::Complex64,
        k => return Err(CoreError::format(format!("unknown element kind {}", k))),
    };
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product::<usize>() * kind.slots();
    let mut data = vec![0.0f32; n];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Tensor::from_vec(&shape, kind, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_stf(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_stf(&mut r)
}
