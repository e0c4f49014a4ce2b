//! Binary parameter archive.
//!
//! Layout (all integers little-endian):
//!   magic "MTAR" | version u32 | meta count u32 | (key, val) string pairs
//!   | tensor count u32 | per tensor: name, ndims u32, dims u64*, f64 data
//!   | sha256 of everything above
//! Strings are u32 length + UTF-8 bytes. Metadata keys and tensor names are
//! written in sorted order so equal contents produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::nn::param::HasParams;
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTAR";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Default, Clone)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    /// Snapshot a model's parameters under their registered names.
    pub fn from_model(model: &dyn HasParams, metadata: BTreeMap<String, String>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        let mut dup: Option<String> = None;
        model.visit(&mut |p| {
            if tensors.insert(p.name.clone(), p.value.clone()).is_some() {
                dup = Some(p.name.clone());
            }
        });
        if let Some(name) = dup {
            return Err(CoreError::Archive(format!("duplicate parameter name {name}")));
        }
        Ok(Archive { metadata, tensors })
    }

    /// Write archived tensors back into a model. Every model parameter must
    /// be present with a matching shape; extra archive entries are an error
    /// too, so a load round-trips exactly.
    pub fn apply_to(&self, model: &mut dyn HasParams) -> Result<()> {
        let mut err: Option<CoreError> = None;
        let mut used = 0usize;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {
                    p.value = t.clone();
                    used += 1;
                }
                Some(t) => {
                    err = Some(CoreError::Archive(format!(
                        "shape mismatch for {}: archive {:?} vs model {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                None => {
                    err = Some(CoreError::Archive(format!(
                        "archive is missing parameter {}",
                        p.name
                    )));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != self.tensors.len() {
            return Err(CoreError::Archive(format!(
                "archive has {} tensors but model consumed {used}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut buf, k);
            write_str(&mut buf, v);
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(CoreError::Archive("truncated archive".into()));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != checksum {
            return Err(CoreError::Archive("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CoreError::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(CoreError::Archive(format!(
                "unsupported archive version {version}"
            )));
        }
        let n_meta = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndims = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(CoreError::Archive("trailing bytes in archive".into()));
        }
        Ok(Archive { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
            .map_err(|e| CoreError::Archive(format!("{}: {e}", path.display())))
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CoreError::Archive(format!("archive metadata missing key {key}")))
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Archive("unexpected end of archive".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CoreError::Archive("invalid UTF-8 in archive string".into()))
    }
}
