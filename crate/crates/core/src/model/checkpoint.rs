//! `u64` little-endian header length, JSON header, then every parameter as
//! little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::lora::GateMode;

const FORMAT: &str = "routed-dit-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub step: u64,
    /// `"init"`, `"base"` or the adapter stage number.
    pub stage: String,
    pub gate_mode: GateMode,
    /// Free-form training context (switches, seeds).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub manifest: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

pub fn encode_checkpoint(model: &Model, step: u64, stage: &str, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(model.params.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for id in model.params.ids() {
        let t = model.params.get(id);
        manifest.push(TensorEntry {
            name: model.params.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        config: model.config,
        step,
        stage: stage.into(),
        gate_mode: model.gate_mode(),
        meta,
        manifest,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format '{}'", header.format)));
    }
    let blob = &bytes[8 + len..];
    let mut model = Model::new(header.config, 0)?;
    model.set_gate_mode(header.gate_mode);
    if header.manifest.len() != model.params.len() {
        return Err(bad(&format!(
            "{} tensors stored, model has {}",
            header.manifest.len(),
            model.params.len()
        )));
    }
    for entry in &header.manifest {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| bad(&format!("unexpected tensor '{}'", entry.name)))?;
        let t = model.params.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(bad(&format!("'{}' has shape {:?}, expected {:?}", entry.name, entry.shape, t.shape())));
        }
        let start = entry.offset * 4;
        let raw = blob
            .get(start..start + t.numel() * 4)
            .ok_or_else(|| bad(&format!("blob too short for '{}'", entry.name)))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    Ok(Checkpoint { header, model })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, step: u64, stage: &str, meta: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, step, stage, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
