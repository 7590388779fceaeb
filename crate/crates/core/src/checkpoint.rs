//! Binary parameter checkpoints.
//!
//! Layout (little-endian): `"GTPT"`, version `u32`, entry count `u32`, then
//! per entry a `u16` name length, the UTF-8 name, dtype `u8` (0 = f32,
//! 1 = f64), rank `u8`, `u32` dims and the raw values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore, Real};

const MAGIC: &[u8; 4] = b"GTPT";
const VERSION: u32 = 1;

pub fn to_bytes<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(value.rank() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_values<S: Real, T: Real>(c: &mut Cursor<'_>, n: usize) -> Result<Vec<T>> {
    let raw = c.take(n * S::BYTES)?;
    Ok(raw
        .chunks_exact(S::BYTES)
        .map(|b| T::lit(S::read_le(b).as_f64()))
        .collect())
}

/// Parses a checkpoint, converting values to `T` when the stored dtype
/// differs.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a GTPT checkpoint".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::Format(format!("`{name}` has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => read_values::<f32, T>(&mut c, n)?,
            1 => read_values::<f64, T>(&mut c, n)?,
            other => return Err(Error::Format(format!("`{name}` has unknown dtype {other}"))),
        };
        store.insert(name, Array::new(&shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last entry".into()));
    }
    Ok(store)
}

pub fn save<T: Real>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, to_bytes(store)?)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    from_bytes(&std::fs::read(path)?)
}
