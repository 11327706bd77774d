//! Self-describing checkpoints: named tensors in a safetensors archive plus a
//! JSON record of the model configuration and training position.
//!
//! Readers ignore metadata keys they do not know, so older builds can open
//! checkpoints written by newer ones as long as the format version matches.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainMode;
use crate::error::{LabError, Result};
use crate::model::{Detector, DetectorConfig, SslHeadSpec};
use crate::optim::AdamW;

pub const CHECKPOINT_FORMAT: &str = "ssldetr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: DetectorConfig,
    pub ssl_head: Option<SslHeadSpec>,
    pub mode: TrainMode,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub seed: u64,
    #[serde(default)]
    pub class_names: Vec<String>,
}

pub struct Checkpoint {
    pub path: PathBuf,
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn ckpt_error(path: &Path, message: impl Into<String>) -> LabError {
    LabError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes model parameters and optional optimizer state. The file appears
/// atomically: it is written beside the target and renamed into place.
pub fn save_checkpoint(
    path: &Path,
    model: &Detector,
    optimizer: Option<&AdamW>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors = model.params().snapshot()?;
    if let Some(opt) = optimizer {
        tensors.extend(opt.state_tensors());
    }
    let mut info = HashMap::new();
    info.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    info.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    info.insert(
        "meta".to_string(),
        serde_json::to_string(meta).map_err(|e| LabError::json(path, e))?,
    );
    let tmp = path.with_extension("safetensors.partial");
    safetensors::serialize_to_file(tensors.iter(), Some(info), &tmp)
        .map_err(|e| ckpt_error(&tmp, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let buffer = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&buffer)
        .map_err(|e| ckpt_error(path, format!("not a safetensors archive: {e}")))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_error(path, "missing metadata"))?;
    if info.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(ckpt_error(path, "not an ssldetr checkpoint"));
    }
    let version: u32 = info
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ckpt_error(path, "missing format version"))?;
    if version > CHECKPOINT_VERSION {
        return Err(ckpt_error(
            path,
            format!("format version {version} is newer than supported {CHECKPOINT_VERSION}"),
        ));
    }
    let meta: CheckpointMeta = serde_json::from_str(
        info.get("meta")
            .ok_or_else(|| ckpt_error(path, "missing meta record"))?,
    )
    .map_err(|e| ckpt_error(path, format!("bad meta record: {e}")))?;
    let tensors = candle_core::safetensors::load_buffer(&buffer, device)?
        .into_iter()
        .collect();
    Ok(Checkpoint {
        path: path.to_path_buf(),
        meta,
        tensors,
    })
}

impl Checkpoint {
    /// Rebuilds the detector with every parameter restored.
    pub fn build_model(&self, dtype: DType, device: &Device) -> Result<Detector> {
        let model = Detector::new(&self.meta.model, self.meta.ssl_head, self.meta.seed, dtype, device)?;
        let copied = model.params().load_matching(&self.tensors, &[""])?;
        if copied != model.params().len() {
            let missing: Vec<&str> = model
                .params()
                .names()
                .filter(|n| !self.tensors.contains_key(*n))
                .collect();
            return Err(ckpt_error(
                &self.path,
                format!("parameters missing from checkpoint: {}", missing.join(", ")),
            ));
        }
        Ok(model)
    }

    /// Copies the tensors under `prefixes` into `model`; returns the count.
    pub fn transfer(&self, model: &Detector, prefixes: &[&str]) -> Result<usize> {
        let n = model.params().load_matching(&self.tensors, prefixes)?;
        if n == 0 {
            return Err(ckpt_error(
                &self.path,
                format!("no parameters under {prefixes:?}"),
            ));
        }
        Ok(n)
    }
}
