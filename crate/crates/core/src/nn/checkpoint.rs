//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DRFW`, version `u16`, then until EOF one
//! record per parameter: name length `u16`, UTF-8 name, rank `u8`,
//! `rank` x `u32` dims, and the `f64` payload.

use std::io::{Read, Write};

use crate::error::{DrfError, Result};
use crate::nn::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DRFW";
pub const VERSION: u16 = 1;

pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| DrfError::Format(format!("parameter name too long: {}", p.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let rank = u8::try_from(p.tensor.rank())
            .map_err(|_| DrfError::Format("tensor rank exceeds 255".into()))?;
        w.write_all(&[rank])?;
        for &d in &p.tensor.shape {
            let d =
                u32::try_from(d).map_err(|_| DrfError::Format("dimension exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.len() * 8);
        for v in &p.tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(DrfError::Format("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes(cur.array()?);
    if version != VERSION {
        return Err(DrfError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let len = u16::from_le_bytes(cur.array()?) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| DrfError::Format(format!("parameter name: {e}")))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.array()?) as usize);
        }
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(name, Tensor::new(&shape, data)?)?;
    }
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(DrfError::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}
