//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SLMT" | version: u32 | config digest: [u8; 32] | entry count: u32
//! per entry: name length: u32 | name (utf-8) | dtype tag: u8
//!            | ndim: u32 | dims: u64 * ndim | payload
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLMT";
pub const FORMAT_VERSION: u32 = 1;

/// One stored tensor. Values are widened to `f64`, which is exact for
/// `f32` payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor<f64>,
}

impl Entry {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        Entry {
            name: name.to_string(),
            dtype: T::DTYPE,
            tensor: t.cast(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        self.tensor.cast()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            out.extend_from_slice(&(e.tensor.ndim() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                match e.dtype {
                    DType::F32 => (v as f32).write_le(&mut out),
                    DType::F64 => v.write_le(&mut out),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.size_of())?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw.chunks(4).map(|c| f32::read_le(c) as f64).collect(),
                DType::F64 => raw.chunks(8).map(f64::read_le).collect(),
            };
            entries.push(Entry {
                name,
                dtype,
                tensor: Tensor::new(shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { digest, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
