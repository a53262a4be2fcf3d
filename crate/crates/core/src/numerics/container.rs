//! Binary parameter container used for checkpoints and feature files.
//!
//! Layout (little endian):
//! ```text
//! magic    8 bytes  "JEITPARM"
//! version  u32
//! n_meta   u32, then n_meta x (key: str, value: str)
//! n_entry  u32, then n_entry x (name: str, rank: u32, dims: rank x u64,
//!                               values: prod(dims) x f64)
//! str      = u32 byte length + UTF-8 bytes
//! ```
//! Metadata keys are written in sorted order, entries in insertion order,
//! so `write(read(bytes)) == bytes`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JEITPARM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            meta: BTreeMap::new(),
            entries: params.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter in `params` from the entry of the same
    /// name; shapes must agree.
    pub fn load_into(&self, params: &mut ParamSet) -> Result<()> {
        for p in params.iter_mut() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("missing entry {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "entry {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Format("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(Self { meta, entries })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn byte_exact_round_trip(
            values in prop::collection::vec(prop::num::f64::ANY, 0..24),
            cols in 1usize..5,
            key in "[a-z]{1,8}",
        ) {
            let rows = values.len() / cols;
            let data = values[..rows * cols].to_vec();
            let mut c = Container::new();
            c.meta.insert(key, "v".into());
            c.push("enc.W", Tensor::new(vec![rows, cols], data).unwrap());
            c.push("scalar", Tensor::vector(vec![1.5]));
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.push("a", Tensor::vector(vec![1.0, 2.0]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Container::from_bytes(&bad).is_err());
    }

    #[test]
    fn load_into_checks_shapes() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let mut c = Container::new();
        c.push("a", Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(c.load_into(&mut ps).is_err());
        let mut c = Container::new();
        c.push("a", Tensor::vector(vec![4.0, 5.0]));
        c.load_into(&mut ps).unwrap();
        assert_eq!(ps.by_name("a").unwrap().tensor.data(), &[4.0, 5.0]);
    }
}
