//! Model checkpoints: magic `VSAGECKP`, a length-prefixed JSON manifest and
//! the parameters as little-endian `f32` blobs in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::container::{check_payload, frame_bytes, push_f32s, read_f32s, unframe};
use crate::error::{Error, Result};
use crate::experts::{ExpertKind, ExpertModel, ModelConfig};
use crate::params::ParamGroup;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VSAGECKP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraInfo {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub expert_id: ExpertKind,
    pub stage: u8,
    pub lora: Option<LoraInfo>,
    pub dtype: String,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn encode_checkpoint<T: Scalar>(model: &ExpertModel<T>, stage: u8) -> Result<Vec<u8>> {
    let params: Vec<ParamEntry> = model
        .store
        .iter()
        .map(|(_, p)| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            group: p.group.as_str().to_string(),
        })
        .collect();
    let manifest = Manifest {
        expert_id: model.kind,
        stage,
        lora: model.backbone.lora().map(|(rank, alpha)| LoraInfo { rank, alpha }),
        dtype: "f32le".into(),
        model: model.config.clone(),
        params,
    };
    let header = serde_json::to_vec(&manifest)?;
    let total: usize = model.store.iter().map(|(_, p)| p.value.numel()).sum();
    let mut out = frame_bytes(CHECKPOINT_MAGIC, &header, 4 * total);
    for (_, p) in model.store.iter() {
        let vals: Vec<f32> = p.value.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
        push_f32s(&mut out, &vals);
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let (json, payload) = unframe(bytes, CHECKPOINT_MAGIC)?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::BadHeader(e.to_string()))?;
    if manifest.dtype != "f32le" {
        return Err(Error::BadHeader(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    Ok((manifest, payload))
}

/// Rebuilds the model described by the manifest and loads its weights.
/// Returns the model and the stage it was saved at.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ExpertModel<T>, u8)> {
    let (m, payload) = read_manifest(bytes)?;
    let total: usize = m.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    check_payload(payload, 4 * total)?;
    let mut model = ExpertModel::<T>::new(m.expert_id, m.model.clone(), 0)?;
    if let Some(l) = m.lora {
        model.backbone.insert_lora(&mut model.store, l.rank, l.alpha, 0)?;
    }
    if model.store.len() != m.params.len() {
        return Err(Error::HeaderMismatch(format!(
            "manifest lists {} parameters, model has {}",
            m.params.len(),
            model.store.len()
        )));
    }
    let values = read_f32s(payload);
    let mut offset = 0;
    for entry in &m.params {
        let id = model
            .store
            .lookup(&entry.name)
            .ok_or_else(|| Error::HeaderMismatch(format!("unknown parameter {:?}", entry.name)))?;
        let p = model.store.get(id);
        if p.value.shape() != entry.shape.as_slice() || ParamGroup::parse(&entry.group) != Some(p.group) {
            return Err(Error::HeaderMismatch(format!(
                "parameter {:?} is {:?}/{} in the manifest but {:?}/{} in the model",
                entry.name,
                entry.shape,
                entry.group,
                p.value.shape(),
                p.group.as_str()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let data = values[offset..offset + n].iter().map(|&v| T::lit(v as f64)).collect();
        *model.store.value_mut(id) = Tensor::from_vec(&entry.shape, data)?;
        offset += n;
    }
    if m.stage == 2 && m.lora.is_none() {
        return Err(Error::HeaderMismatch("stage-2 checkpoint without adapters".into()));
    }
    model.backbone.set_stage(&mut model.store, m.stage)?;
    Ok((model, m.stage))
}

pub fn save_checkpoint<T: Scalar>(model: &ExpertModel<T>, stage: u8, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, stage)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ExpertModel<T>, u8)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&bytes)
}
