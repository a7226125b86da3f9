//! Versioned checkpoint container.
//!
//! Layout: `b"PCKP"`, `u32` format version, `u64` header length, a JSON
//! header (kind, training step, config echo, free-form metadata, tensor
//! table), then the raw little-endian tensor data in table order.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::store::sha256_hex;

const MAGIC: &[u8; 4] = b"PCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    config: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::contract(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let start = data.len() as u64;
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| data.extend(v.to_le_bytes())),
                DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| data.extend(v.to_le_bytes())),
                _ => {}
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                dtype: dtype_name(t.dtype())?.to_string(),
                offset: start,
                nbytes: data.len() as u64 - start,
            });
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header);
        out.extend(data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::contract("not a pathcast checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::contract(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::contract("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let raw = data
                .get(e.offset as usize..(e.offset + e.nbytes) as usize)
                .ok_or_else(|| Error::contract(format!("truncated tensor `{}`", e.name)))?;
            let t = match e.dtype.as_str() {
                "f32" => {
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                "f64" => {
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                other => return Err(Error::contract(format!("unsupported dtype `{other}`"))),
            };
            tensors.push((e.name, t));
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Content id of the serialized checkpoint.
    pub fn id(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Writes atomically (temp file + rename) and returns the content id.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, sha256_hex(&bytes)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::contract(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}
