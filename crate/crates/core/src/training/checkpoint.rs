//! Checkpoint file format.
//!
//! ```text
//! "SMDK" | u32 LE version (1) | u32 LE header length | JSON header | payload
//! ```
//!
//! The header holds the training configuration, the step, the router seed,
//! and a tensor index of `(name, shape, byte offset)` plus the SHA-256 of the
//! payload. The payload is every tensor as little-endian `f32`, back to back.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::autograd::ParamGroup;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMDK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub frozen: bool,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    /// Seed every initialization stream (including the router's) came from.
    pub router_seed: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    group: ParamGroup,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    step: usize,
    router_seed: u64,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn err(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

impl Checkpoint {
    /// Snapshot of `model`; the stored config's model section is replaced by
    /// the model's own.
    pub fn from_model(model: &Model<f32>, config: &TrainConfig, step: usize) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            config,
            step,
            router_seed: model.seed,
            tensors: model
                .params
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    group: p.group,
                    frozen: p.frozen,
                    value: (*p.value).clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every stored tensor must match a parameter.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.model.clone(), self.router_seed)?;
        if model.params.len() != self.tensors.len() {
            return Err(err(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for t in &self.tensors {
            let id = model
                .params
                .id(&t.name)
                .ok_or_else(|| err(format!("unexpected tensor {}", t.name)))?;
            model.params.set_value(id, t.value.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.value.shape().to_vec(),
                offset: payload.len(),
                group: t.group,
                frozen: t.frozen,
            });
            for x in t.value.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            step: self.step,
            router_seed: self.router_seed,
            tensors: entries,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(err("missing SMDK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(err(format!(
                "version mismatch: file has {version}, expected {VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(err("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| err(format!("bad header: {e}")))?;
        let payload = &body[hlen..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(err("payload checksum mismatch"));
        }
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = e.offset + 4 * n;
                if end > payload.len() {
                    return Err(err(format!("tensor {} runs past the payload", e.name)));
                }
                let data = payload[e.offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(NamedTensor {
                    name: e.name,
                    group: e.group,
                    frozen: e.frozen,
                    value: Tensor::new(e.shape, data)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: header.config,
            step: header.step,
            router_seed: header.router_seed,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Short content hash of the serialized checkpoint.
    pub fn id(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?))[..12].to_string())
    }
}
