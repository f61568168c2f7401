//! Checkpoints: a safetensors parameter blob plus a JSON sidecar at the same path
//! with extension `.json`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, ModelConfig};
use crate::schedule::ScheduleDescriptor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub schedule: ScheduleDescriptor,
    /// `absorbing` or `multinomial`.
    pub noise: String,
    pub step: u64,
    /// `f32` or `f64`.
    pub dtype: String,
    pub param_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

/// Writes the blob and sidecar. `param_hash` and `dtype` in `meta` are overwritten with
/// the model's current values.
pub fn save_checkpoint(model: &DenoiserModel, path: &Path, meta: &CheckpointMeta) -> Result<CheckpointMeta> {
    let mut meta = meta.clone();
    meta.config = model.config().clone();
    meta.dtype = dtype_name(model.dtype())?.to_string();
    meta.param_hash = model.param_hash()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tensors: HashMap<String, Tensor> = model
        .params()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    candle_core::safetensors::save(&tensors, path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Restores a model. When `expected_vocab_hash` is given, a checkpoint built against a
/// different vocabulary is refused.
pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<&str>) -> Result<(DenoiserModel, CheckpointMeta)> {
    let meta = read_meta(path)?;
    if let Some(expected) = expected_vocab_hash {
        if expected != meta.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {} vs current {}",
                meta.vocab_hash, expected
            )));
        }
    }
    let dtype = parse_dtype(&meta.dtype)?;
    let model = DenoiserModel::new(&meta.config, 0, dtype)?;
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} not found", path.display())));
    }
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)?
        .into_iter()
        .collect();
    model.set_params(&tensors)?;
    let hash = model.param_hash()?;
    if hash != meta.param_hash {
        return Err(Error::Checkpoint(format!(
            "parameter hash mismatch: sidecar {} vs blob {}",
            meta.param_hash, hash
        )));
    }
    Ok((model, meta))
}
