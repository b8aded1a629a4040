//! Single-file checkpoints: every parameter tensor keyed by module path plus
//! a JSON header stored in the safetensors metadata block.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MemoModel, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "memo_header";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub dtype: String,
    /// Free-form state owned by the writer (training progress, seeds).
    #[serde(default)]
    pub state: serde_json::Value,
}

impl CheckpointHeader {
    pub fn for_model(model: &MemoModel, state: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.config,
            dtype: format!("{:?}", model.dtype()).to_lowercase(),
            state,
        }
    }
}

fn ckpt_err(path: &Path, detail: impl ToString) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), detail: detail.to_string() }
}

/// Writes model parameters plus `extra` tensors (e.g. optimizer moments).
pub fn save(path: &Path, model: &MemoModel, header: &CheckpointHeader, extra: &BTreeMap<String, Tensor>) -> Result<()> {
    let params = model.store.snapshot()?;
    let mut all: BTreeMap<String, Tensor> = params;
    for (k, v) in extra {
        if all.insert(k.clone(), v.clone()).is_some() {
            return Err(ckpt_err(path, format!("tensor name {k} collides with a parameter")));
        }
    }
    let mut meta = HashMap::new();
    meta.insert(HEADER_KEY.to_string(), serde_json::to_string(header)?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // write then rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(all.iter().map(|(k, v)| (k.as_str(), v)), Some(meta), &tmp)
        .map_err(|e| ckpt_err(path, e))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Loaded {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, Tensor>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| ckpt_err(path, "missing header"))?;
    let header: CheckpointHeader = serde_json::from_str(raw).map_err(|e| ckpt_err(path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {}", header.format_version)));
    }
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name, view.load(&Device::Cpu)?);
    }
    Ok(Loaded { header, tensors })
}

fn parse_dtype(s: &str) -> Result<candle_core::DType> {
    match s {
        "f32" => Ok(candle_core::DType::F32),
        "f64" => Ok(candle_core::DType::F64),
        other => Err(Error::invalid(format!("unsupported dtype {other}"))),
    }
}

/// Rebuilds a model from a checkpoint.
pub fn load_model(path: &Path) -> Result<(MemoModel, Loaded)> {
    let loaded = load(path)?;
    let model = MemoModel::new(loaded.header.model, parse_dtype(&loaded.header.dtype)?)?;
    model.store.load(&loaded.tensors).map_err(|e| ckpt_err(path, e))?;
    Ok((model, loaded))
}
