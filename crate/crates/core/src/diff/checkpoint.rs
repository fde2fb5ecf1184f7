//! Binary parameter checkpoints.
//!
//! Layout: the magic `F2BEVCKPT1`, then one record per parameter until end of
//! file: `u32` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64), `u32`
//! rank, `u32` per dimension, raw little-endian data. Integers are
//! little-endian.

use std::path::Path;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 10] = b"F2BEVCKPT1";

/// A decoded checkpoint entry, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: u8,
    pub value: Tensor<f64>,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut c = Cursor {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let n = c.u32()?;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
        let dtype = c.take(1)?[0];
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            0 => c.take(len * 4)?.chunks_exact(4).map(|b| f32::read_le(b) as f64).collect(),
            1 => c.take(len * 8)?.chunks_exact(8).map(f64::read_le).collect(),
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other} for {name}"))),
        };
        records.push(Record {
            name,
            dtype,
            value: Tensor::new(&shape, data)?,
        });
    }
    Ok(records)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

/// Overwrites every parameter of `store` from the checkpoint. Names and shapes
/// must match exactly; the dtype may differ.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(store, &decode(&bytes)?)
}

pub fn restore<T: Scalar>(store: &mut ParamStore<T>, records: &[Record]) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!("{} records for a model with {} parameters", records.len(), store.len())));
    }
    for r in records {
        let id = store
            .find(&r.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", r.name)))?;
        store
            .set_value(id, r.value.cast())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", r.name)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::param::Init;

    #[test]
    fn round_trip_and_layout() {
        let mut s = ParamStore::<f32>::new(9);
        s.add("a.w", &[2, 3], Init::Uniform { bound: 1.0 }).unwrap();
        s.add("b", &[1], Init::Values(vec![0.5])).unwrap();
        let bytes = encode(&s);
        assert_eq!(&bytes[..10], b"F2BEVCKPT1");
        assert_eq!(&bytes[10..14], &3u32.to_le_bytes());
        assert_eq!(&bytes[14..17], b"a.w");
        assert_eq!(bytes[17], 0);
        let recs = decode(&bytes).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].value.data(), &[0.5]);

        let mut t = ParamStore::<f32>::new(1);
        t.add("a.w", &[2, 3], Init::Zeros).unwrap();
        t.add("b", &[1], Init::Zeros).unwrap();
        restore(&mut t, &recs).unwrap();
        assert_eq!(encode(&t), bytes);

        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOTACKPT00").is_err());
        let mut wrong = ParamStore::<f32>::new(1);
        wrong.add("a.w", &[3, 2], Init::Zeros).unwrap();
        wrong.add("b", &[1], Init::Zeros).unwrap();
        assert!(restore(&mut wrong, &recs).is_err());
    }
}
