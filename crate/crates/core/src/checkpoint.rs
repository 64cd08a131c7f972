//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (metadata plus a tensor index), raw little-endian tensor data, and
//! a trailing SHA-256 of everything before it. Files are written to a
//! temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::io::write_atomic;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::nn::params::tensor_le_bytes;
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"UNBLURCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Training stage that produced the file (1 or 2).
    pub stage: u32,
    pub step: u64,
    pub seed: u64,
    /// Canonical config text.
    pub config: String,
    pub schedule: Option<DiffusionSchedule>,
    /// Groups whose parameters were frozen while this state was trained.
    pub frozen: Vec<String>,
    /// SHA-256 of each parameter group.
    pub digests: BTreeMap<String, String>,
    /// Optimizer step counters by optimizer name.
    pub optimizer_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: Metadata,
    tensors: Vec<IndexEntry>,
}

/// Named tensors grouped as `group/name` plus metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: Metadata) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every parameter of `store` under `group/` and records its digest.
    pub fn add_store(&mut self, group: &str, store: &ParamStore) -> Result<()> {
        for (name, var) in store.vars() {
            self.tensors.insert(format!("{group}/{name}"), var.as_tensor().detach());
        }
        self.meta.digests.insert(group.to_string(), store.digest()?);
        Ok(())
    }

    pub fn add_tensors(&mut self, group: &str, tensors: impl IntoIterator<Item = (String, Tensor)>) {
        for (name, t) in tensors {
            self.tensors.insert(format!("{group}/{name}"), t.detach());
        }
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    /// Tensors of one group with the prefix stripped.
    pub fn group(&self, group: &str) -> Result<BTreeMap<String, Tensor>> {
        let prefix = format!("{group}/");
        let out: BTreeMap<_, _> = self
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
            .collect();
        if out.is_empty() {
            return Err(Error::MissingGroup(group.to_string()));
        }
        Ok(out)
    }

    /// Copies a stored group into `store`; every parameter must be present.
    pub fn load_store(&self, group: &str, store: &ParamStore) -> Result<()> {
        let tensors = self.group(group)?;
        for name in store.vars().keys() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("group `{group}` lacks parameter `{name}`")))?;
            store.assign(name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = tensor_le_bytes(t)?;
            index.push(IndexEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: data.len() as u64,
                len: bytes.len() as u64,
            });
            data.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + data.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("corrupted checkpoint: {what}"));
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or truncated"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, hash) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != hash {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|e| *e <= body.len()).ok_or_else(|| corrupt("header length"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let data = &body[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            let raw = data.get(start..end).ok_or_else(|| corrupt("tensor extent"))?;
            let numel: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" if raw.len() == numel * 4 => {
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                "f64" if raw.len() == numel * 8 => {
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                _ => return Err(corrupt(&format!("tensor `{}`", e.name))),
            };
            tensors.insert(e.name, t);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}
