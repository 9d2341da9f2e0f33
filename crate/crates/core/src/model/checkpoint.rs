//! Checkpoint files: a safetensors parameter map whose header metadata holds
//! everything needed to rebuild the model (variant, vocabulary, model config,
//! normalization).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelVariant, Normalization};
use crate::datamodel::Vocabulary;
use crate::{Error, Result};

const FORMAT: &str = "attrdet-checkpoint/1";
const META_KEY: &str = "attrdet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub variant: ModelVariant,
    pub vocabulary: Vocabulary,
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub seed: u64,
    pub step: usize,
}

pub fn save(model: &Model, step: usize, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        variant: model.variant,
        vocabulary: model.vocabulary.clone(),
        config: model.config.clone(),
        normalization: model.normalization,
        seed: model.params().seed(),
        step,
    };
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(&meta)?);
    // BTreeMap iteration keeps the on-disk tensor order stable
    let tensors: Vec<(String, Tensor)> = model
        .params()
        .vars()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    safetensors::serialize_to_file(tensors, Some(info), path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint("missing model metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(text)?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", meta.format)));
    }
    Ok(meta)
}

/// Rebuilds the model described by the checkpoint and loads its parameters.
pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let meta = read_meta(&bytes)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &candle_core::Device::Cpu)?;
    let dtype = tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
    let mut model = Model::build(meta.variant, &meta.vocabulary, &meta.config, meta.seed, dtype)?;
    model.params().load_from(&tensors)?;
    model.normalization = meta.normalization;
    Ok((model, meta))
}
