//! Versioned binary checkpoint.
//!
//! ```text
//! magic       8 bytes  "ATQCKPT\0"
//! version     u32
//! meta_len    u32, then meta_len bytes of UTF-8 JSON metadata
//! count       u32
//! name table  count × { u32 len, name, u32 len, group, u8 trainable }
//! tensors     count × { u8 dtype (1 = f32, 2 = f64), u32 ndim, ndim × u64 dims,
//!                       u64 payload bytes, payload, u64 checksum }
//! ```
//!
//! All integers and payloads are little-endian. The checksum is the first
//! eight bytes of the payload's SHA-256, read as a little-endian `u64`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATQCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub params: ParamStore,
}

fn checksum(payload: &[u8]) -> u64 {
    let d = Sha256::digest(payload);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl Checkpoint {
    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::Data(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            for s in [&e.name, &e.group] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            out.push(u8::from(e.trainable));
        }
        for e in entries {
            out.push(dtype.tag());
            let shape = e.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload: Vec<u8> = match dtype {
                DType::F64 => e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
                DType::F32 => e.value.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            };
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
            out.extend_from_slice(&checksum(&payload).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let group = r.string()?;
            let trainable = r.take(1)?[0] != 0;
            names.push((name, group, trainable));
        }
        let mut params = ParamStore::new();
        for (name, group, trainable) in names {
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            if r.u64()? != checksum(payload) {
                return Err(Error::Data(format!("checksum mismatch for tensor `{name}`")));
            }
            let data: Vec<f64> = match dtype {
                2 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                1 => payload
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                other => return Err(Error::Data(format!("unknown dtype tag {other} for tensor `{name}`"))),
            };
            let id = params.insert(name, group, Tensor::new(shape, data)?)?;
            params.set_trainable(id, trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self { metadata, params })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes(dtype)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Data(e.to_string()))
    }
}
