//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `AFP1`, `u32` header length, JSON header,
//! then every tensor's `f32` payload in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{AfpModel, Architecture, ModelDims, Parameters};
use super::AfpError;
use crate::numkernel::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: usize,
    pub initial_val_loss: f64,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: f64,
    pub config_digest: String,
}

/// A trained predictor with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct AfpCheckpoint {
    pub model: AfpModel,
    pub meta: TrainingMeta,
}

impl AfpCheckpoint {
    pub fn architecture(&self) -> Architecture {
        self.model.architecture
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    seed: u64,
    dims: ModelDims,
    training_meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &AfpCheckpoint) -> Vec<u8> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        architecture: ckpt.model.architecture,
        seed: ckpt.model.seed,
        dims: ckpt.model.dims,
        training_meta: ckpt.meta.clone(),
        tensors: ckpt
            .model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = ckpt.model.params.values().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 4 * payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in ckpt.model.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AfpCheckpoint, AfpError> {
    let bad = |msg: &str| AfpError::Checkpoint(msg.to_string());
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(8..8 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| AfpError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(AfpError::VersionMismatch {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut offset = 8 + header_len;
    let mut params = Parameters::new();
    for entry in header.tensors {
        if entry.dtype != "f32" {
            return Err(AfpError::Checkpoint(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let len: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * len)
            .ok_or_else(|| AfpError::Checkpoint(format!("{}: truncated payload", entry.name)))?;
        offset += 4 * len;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape, data)?;
        params.insert(entry.name, tensor);
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    let model = AfpModel {
        architecture: header.architecture,
        seed: header.seed,
        dims: header.dims,
        params,
    };
    model.check_manifest()?;
    Ok(AfpCheckpoint {
        model,
        meta: header.training_meta,
    })
}

pub fn save_checkpoint(ckpt: &AfpCheckpoint, path: &Path) -> Result<(), AfpError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AfpError::io(path, e))?;
    }
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| AfpError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AfpCheckpoint, AfpError> {
    let bytes = fs::read(path).map_err(|e| AfpError::io(path, e))?;
    decode_checkpoint(&bytes)
}
