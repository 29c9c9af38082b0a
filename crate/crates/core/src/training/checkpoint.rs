//! Binary checkpoint format for named weight tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "SANM"
//! version u32      currently 1
//! mlen    u32      manifest byte length
//! manifest UTF-8 JSON: { tensors: [{name, shape, dtype}], meta: {...} }
//! payload  f32 LE values, tensors concatenated in manifest order
//! ```
//!
//! Weights are stored as `f32`; loading widens back to `f64`. Saving a
//! just-loaded checkpoint reproduces the file byte for byte.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};
use crate::numerics::tensor::NdTensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SANM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance carried inside the manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// What the tensors parameterize, e.g. "generator", "codec", "embedder".
    pub kind: String,
    pub seed: u64,
    pub epoch: u64,
    /// Free-form configuration echo (the CLI stores the effective run
    /// config here).
    #[serde(default)]
    pub config: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(kind: impl Into<String>, seed: u64, epoch: u64) -> Self {
        CheckpointMeta {
            kind: kind.into(),
            seed,
            epoch,
            config: serde_json::Value::Null,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

/// An in-memory checkpoint: ordered named tensors plus metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, NdTensor)>,
    pub meta: CheckpointMeta,
}

/// Serialize named tensors to the checkpoint byte format.
pub fn checkpoint_bytes(tensors: &[(String, NdTensor)], meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let manifest = Manifest {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".to_string(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let mjson = serde_json::to_vec(&manifest)
        .map_err(|e| SanmError::Format(format!("manifest serialization failed: {e}")))?;
    let mut out = Vec::with_capacity(12 + mjson.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&mjson);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Write a checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    tensors: &[(String, NdTensor)],
    meta: &CheckpointMeta,
) -> Result<()> {
    let bytes = checkpoint_bytes(tensors, meta)?;
    std::fs::write(path, bytes).map_err(|e| SanmError::io(path, e))
}

/// Parse checkpoint bytes.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(SanmError::Format(format!(
            "checkpoint truncated: {} bytes is shorter than the 12-byte header",
            bytes.len()
        )));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(SanmError::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            &bytes[0..4],
            CHECKPOINT_MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(SanmError::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < mlen {
        return Err(SanmError::Format(format!(
            "corrupt manifest: declared {mlen} bytes but only {} remain",
            body.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])
        .map_err(|e| SanmError::Format(format!("corrupt manifest: {e}")))?;
    let mut payload = &body[mlen..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(SanmError::Format(format!(
                "tensor '{}' has unsupported dtype '{}'",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let need = numel * 4;
        if payload.len() < need {
            return Err(SanmError::Format(format!(
                "payload truncated at tensor '{}': need {need} bytes, {} remain",
                entry.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[..need].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        payload = &payload[need..];
        tensors.push((entry.name.clone(), NdTensor::from_vec(&entry.shape, data)?));
    }
    if !payload.is_empty() {
        return Err(SanmError::Format(format!(
            "checkpoint has {} trailing bytes after the last tensor",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        tensors,
        meta: manifest.meta,
    })
}

/// Read and parse a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| SanmError::io(path, e))?;
    parse_checkpoint(&bytes)
}

/// Copy checkpoint tensors into a model's named parameters. The name sets
/// must match exactly and every shape must agree; partial loads are refused
/// so a checkpoint can never silently half-initialize a model.
pub fn load_into(checkpoint: &Checkpoint, params: &mut [(String, &mut NdTensor)]) -> Result<()> {
    let mut by_name: HashMap<&str, &NdTensor> = HashMap::new();
    for (name, t) in &checkpoint.tensors {
        if by_name.insert(name.as_str(), t).is_some() {
            return Err(SanmError::Format(format!(
                "checkpoint lists tensor '{name}' twice"
            )));
        }
    }
    for (name, target) in params.iter_mut() {
        let src = by_name.remove(name.as_str()).ok_or_else(|| {
            SanmError::Format(format!("checkpoint is missing tensor '{name}'"))
        })?;
        if src.shape() != target.shape() {
            return Err(SanmError::Format(format!(
                "tensor '{name}' shape mismatch: checkpoint {:?}, model {:?}",
                src.shape(),
                target.shape()
            )));
        }
        **target = src.detach();
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(SanmError::Format(format!(
            "checkpoint tensor '{extra}' has no matching model parameter"
        )));
    }
    Ok(())
}
