//! Flat little-endian parameter file.
//!
//! Layout: magic `S2CP`, version `u32`, then records until end of file, each
//! `name_len u32, name bytes, rank u32, dims u32 x rank, f32 x prod(dims)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::array::Tensor;

pub const MAGIC: &[u8; 4] = b"S2CP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Record {
            name: name.into(),
            dims: t.dims().iter().map(|&d| d as u32).collect(),
            values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn from_slice<T: Scalar>(name: impl Into<String>, v: &[T]) -> Self {
        Record {
            name: name.into(),
            dims: vec![v.len() as u32],
            values: v.iter().map(|x| x.as_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let mut dims = [1usize; 4];
        if self.dims.len() > 4 {
            return Err(Error::Checkpoint(format!("{}: rank {} > 4", self.name, self.dims.len())));
        }
        let off = 4 - self.dims.len();
        for (i, &d) in self.dims.iter().enumerate() {
            dims[off + i] = d as usize;
        }
        Tensor::from_vec(dims, self.values.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::of(v as f64)).collect()
    }
}

/// Ordered set of named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) {
        if let Some(r) = self.records.iter_mut().find(|r| r.name == record.name) {
            *r = record;
        } else {
            self.records.push(record);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Checkpoint(format!("record name at byte {} is not utf-8", cur.pos)))?
                .to_string();
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().map(|&d| d as usize).product();
            let raw = cur.take(count * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.records.push(Record { name, dims, values });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut ck = Checkpoint::new();
        ck.push(Record {
            name: "a".into(),
            dims: vec![2],
            values: vec![1.0, -2.5],
        });
        let b = ck.to_bytes();
        let mut want = b"S2CP".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'a');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"XXXX\x01\0\0\0").is_err());
        let mut ck = Checkpoint::new();
        ck.push(Record::from_slice("x", &[1.0f32, 2.0, 3.0]));
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 2]).is_err());
    }
}
