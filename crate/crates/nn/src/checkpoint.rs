//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DGTB`, `u32` version, `u32` record count,
//! then per record: `u32` name length, UTF-8 name, `u8` trainable flag,
//! `u32` rank, `u32` dims, `f32` payload.

use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGTB";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Real, W: Write>(ps: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ps.len() as u32).to_le_bytes())?;
    for (name, value, trainable) in ps.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[trainable as u8])?;
        w.write_all(&(value.rank() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in value.data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes<T: Real>(ps: &ParamStore<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(ps, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => NnError::Checkpoint("truncated".into()),
            _ => NnError::Io(e),
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }
}

pub fn read_checkpoint<T: Real, R: Read>(r: R) -> Result<ParamStore<T>> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut ps = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len > 1 << 16 {
            return Err(NnError::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|_| NnError::Checkpoint("truncated".into()))?;
        let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("name is not UTF-8".into()))?;
        let trainable = r.bytes::<1>()?[0] != 0;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(NnError::Checkpoint(format!("implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| r.bytes::<4>().map(|b| T::from_f32(f32::from_le_bytes(b))))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data)?;
        if trainable {
            ps.add(&name, t);
        } else {
            ps.add_buffer(&name, t);
        }
    }
    Ok(ps)
}
