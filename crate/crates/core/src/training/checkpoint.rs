//! Checkpoints: a safetensors blob of every trainable tensor plus a JSON
//! sidecar with the format version, epoch, config snapshot and metrics.
//!
//! Tensor names are prefixed by owner: `model.` (gaze network), `semantic.`
//! (pair projector) and `backend.` (fine-tuned image encoder).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::model::GazeModel;
use super::EpochMetrics;
use crate::backend::SharedBackend;
use crate::config::RunConfig;
use crate::error::{GazeError, Result};
use crate::ops::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub epoch: usize,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub metrics: Option<EpochMetrics>,
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// `epoch_0001.ckpt` -> `epoch_0001.meta.json`.
pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("meta.json")
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> GazeError {
    GazeError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn stores(model: &GazeModel) -> Vec<(&'static str, &ParamStore)> {
    let mut out = vec![("model", model.params()), ("semantic", model.semantic_params())];
    if let Some(s) = model.backend().image_encoder_params() {
        out.push(("backend", s));
    }
    out
}

pub fn save_checkpoint(
    model: &GazeModel,
    path: &Path,
    epoch: usize,
    metrics: Option<&EpochMetrics>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for (prefix, store) in stores(model) {
        for (name, var) in store.named_vars() {
            tensors.insert(format!("{prefix}.{name}"), var.as_tensor().clone());
        }
    }
    candle_core::safetensors::save(&tensors, path)?;
    let cfg = model.config();
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        epoch,
        config_hash: cfg.hash(),
        config: cfg.entries().into_iter().collect(),
        metrics: metrics.cloned(),
    };
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp)
        .map_err(|e| ckpt_err(path, format!("cannot read {}: {e}", mp.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| ckpt_err(path, format!("bad sidecar: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    Ok(meta)
}

/// Rebuilds the configuration stored in a checkpoint sidecar.
pub fn checkpoint_config(path: &Path) -> Result<(RunConfig, CheckpointMeta)> {
    if !path.is_file() {
        return Err(ckpt_err(path, "file not found"));
    }
    let meta = read_meta(path)?;
    let mut cfg = RunConfig::default();
    for (k, v) in &meta.config {
        cfg.set(k, v).map_err(|e| ckpt_err(path, e.to_string()))?;
    }
    if cfg.hash() != meta.config_hash {
        return Err(ckpt_err(path, "config hash does not match the stored config"));
    }
    Ok((cfg, meta))
}

/// Overwrites every parameter of `model` from the checkpoint tensors.
pub fn restore_weights(model: &GazeModel, path: &Path) -> Result<()> {
    let tensors = candle_core::safetensors::load(path, model.device())
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    for (prefix, store) in stores(model) {
        for (name, _) in store.named_vars() {
            let key = format!("{prefix}.{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| ckpt_err(path, format!("missing tensor {key}")))?;
            store
                .set(&name, t)
                .map_err(|e| ckpt_err(path, format!("{key}: {e}")))?;
        }
    }
    Ok(())
}

/// Loads a checkpoint, building the backend its config names.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(GazeModel, CheckpointMeta)> {
    let (cfg, meta) = checkpoint_config(path)?;
    let backend = cfg.backend_spec().load(device)?;
    let model = load_checkpoint_with_backend(path, &cfg, backend)?;
    Ok((model, meta))
}

pub fn load_checkpoint_with_backend(path: &Path, cfg: &RunConfig, backend: SharedBackend) -> Result<GazeModel> {
    let model = GazeModel::new(cfg, backend)?;
    restore_weights(&model, path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;
    use crate::training::test_util::{tiny_config, tiny_data, tiny_model};
    use crate::training::Trainer;

    #[test]
    fn round_trip_reproduces_inference_exactly() {
        let cfg = tiny_config();
        let data = tiny_data(&cfg, 4);
        let mut t = Trainer::new(tiny_model(&cfg)).unwrap();
        let (x, y) = data.batch(&[0, 1, 2, 3]).unwrap();
        t.train_step(&x, &y).unwrap();
        let model = t.into_model();
        let before = to_f64_vec(&model.infer(&x).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = checkpoint_path(dir.path(), 7);
        save_checkpoint(&model, &path, 7, None).unwrap();
        let (loaded, meta) = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(meta.epoch, 7);
        assert_eq!(meta.config_hash, cfg.hash());
        assert_eq!(to_f64_vec(&loaded.infer(&x).unwrap()).unwrap(), before);
    }

    #[test]
    fn version_mismatch_and_missing_files_are_checkpoint_errors() {
        let cfg = tiny_config();
        let model = tiny_model(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = checkpoint_path(dir.path(), 1);
        assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(GazeError::Checkpoint { .. })));
        save_checkpoint(&model, &path, 1, None).unwrap();
        let mp = meta_path(&path);
        assert!(mp.ends_with("epoch_0001.meta.json"));
        let text = std::fs::read_to_string(&mp).unwrap();
        std::fs::write(&mp, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
        assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(GazeError::Checkpoint { .. })));
        std::fs::remove_file(&mp).unwrap();
        assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(GazeError::Checkpoint { .. })));
    }
}
