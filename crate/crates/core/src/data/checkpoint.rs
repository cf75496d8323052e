//! Named-tensor checkpoint files.
//!
//! Layout, little-endian: magic `DSF1`, version `u16`, entry count `u32`, then
//! per entry: name length `u16`, UTF-8 name, rank `u8`, one `u32` per extent,
//! and the row-major `f32` payload.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSF1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: IndexMap<String, Tensor<f32>>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        path: "<bytes>".into(),
        reason: reason.into(),
    }
}

fn running(prefix: &str) -> (String, String) {
    (format!("{prefix}.running_mean"), format!("{prefix}.running_var"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.bytes.len())))?;
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

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `t` downcast to `f32`. Names must be unique.
    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate checkpoint entry {name}")));
        }
        self.entries.insert(name, t.cast());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| bad("too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| bad(format!("name {name:?} too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| bad(format!("{name} has rank {}", t.rank())))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| bad(format!("{name} extent {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a whole file; nothing is returned unless every entry is valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(bad(format!("version {version}, expected {VERSION}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("entry name is not UTF-8"))?.to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<usize>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extent overflow"))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| bad("extent overflow"))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if ck.entries.contains_key(&name) {
                return Err(bad(format!("duplicate entry {name}")));
            }
            ck.entries.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { kind, reason, .. } => Error::Format {
                kind,
                path: path.to_path_buf(),
                reason,
            },
            e => e,
        })
    }

    /// Every parameter plus each norm's running statistics.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let mut ck = Checkpoint::new();
        ck.extend_from_store(store)?;
        Ok(ck)
    }

    pub fn extend_from_store<T: Real>(&mut self, store: &ParamStore<T>) -> Result<()> {
        for (name, t) in store.iter() {
            self.insert(name, t)?;
        }
        for (prefix, bn) in store.norms() {
            let (m, v) = running(prefix);
            let c = bn.running_mean.len();
            self.insert(m, &Tensor::new(vec![c], bn.running_mean.clone())?)?;
            self.insert(v, &Tensor::new(vec![c], bn.running_var.clone())?)?;
        }
        Ok(())
    }

    /// Overwrites every tensor and running statistic of `store`. All entries
    /// are checked before anything is written; extra entries are ignored.
    pub fn restore_store<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let find = |name: &str, shape: &[usize]| -> Result<&Tensor<f32>> {
            let t = self.get(name).ok_or_else(|| Error::config(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape {
                return Err(Error::shape(format!("{name}: checkpoint {:?} vs model {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for (name, t) in store.iter() {
            find(name, t.shape())?;
        }
        for (prefix, bn) in store.norms() {
            let (m, v) = running(prefix);
            find(&m, &[bn.running_mean.len()])?;
            find(&v, &[bn.running_var.len()])?;
        }
        for (name, t) in store.iter_mut() {
            *t = self.entries[name].cast();
        }
        for (prefix, bn) in store.norms_mut() {
            let (m, v) = running(prefix);
            bn.running_mean = self.entries[&m].cast::<T>().into_data();
            bn.running_var = self.entries[&v].cast::<T>().into_data();
        }
        Ok(())
    }
}
