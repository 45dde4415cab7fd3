//! Versioned little-endian model files.
//!
//! Layout: `"FVPY"`, `u32` version, `u32` metadata length + metadata JSON,
//! `u32` tensor count, then per tensor: `u32` name length, UTF-8 name,
//! `u32` rank, `u64` dims, `f32` payload.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ModelMeta, ModelParams, Param};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FVPY";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated while reading {what}")]
    Truncated { what: String },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelIoError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelIoError::Truncated {
                what: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&params.meta).expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.params.len() as u32).to_le_bytes());
    for p in &params.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<ModelParams, ModelIoError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic").map_err(|_| ModelIoError::BadMagic)? != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ModelIoError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| ModelIoError::Corrupt(format!("metadata: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let what = format!("tensor {i}");
        let name_len = r.u32(&what)? as usize;
        let name = String::from_utf8(r.take(name_len, &what)?.to_vec())
            .map_err(|_| ModelIoError::Corrupt(format!("{what}: name is not UTF-8")))?;
        let rank = r.u32(&name)? as usize;
        if rank > 8 {
            return Err(ModelIoError::Corrupt(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| ModelIoError::Corrupt(format!("{name}: shape {shape:?} overflows")))?;
        let bytes = r.take(numel * 4, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| ModelIoError::Corrupt(e.to_string()))?;
        params.push(Param { name, value });
    }
    if r.pos != buf.len() {
        return Err(ModelIoError::Corrupt(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(ModelParams { meta, params })
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<(), ModelIoError> {
    fs::write(path, encode(params)).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_params(path: &Path) -> Result<ModelParams, ModelIoError> {
    let buf = fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf)
}

/// JSON mirror of the metadata plus a tensor inventory, for tooling.
pub fn write_sidecar(params: &ModelParams, path: &Path) -> Result<(), ModelIoError> {
    let tensors: Vec<_> = params
        .params
        .iter()
        .map(|p| serde_json::json!({ "name": p.name, "shape": p.value.shape() }))
        .collect();
    let doc = serde_json::json!({
        "format": "FVPY",
        "version": FORMAT_VERSION,
        "meta": params.meta,
        "tensors": tensors,
    });
    let text = serde_json::to_string_pretty(&doc).expect("json");
    fs::write(path, text).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })
}
