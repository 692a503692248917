//! Model assembly, the optimization loop, evaluation and checkpoints.

mod checkpoint;
mod engine;
mod evaluate;
mod model;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, LabeledSample};
use crate::error::{GazeError, Result};
use crate::geometry::GazeDirection;

pub use checkpoint::{
    checkpoint_config, checkpoint_path, load_checkpoint, load_checkpoint_with_backend, meta_path,
    read_meta, restore_weights, save_checkpoint, CheckpointMeta, FORMAT_VERSION,
};
pub use engine::{Trainer, CONFIG_ECHO_FILE, METRICS_FILE, METRICS_HEADER};
pub use evaluate::{evaluate, extract_features, summarize, EvalReport};
pub use model::{GazeModel, TrainForward};

/// `l_gaze + alpha * l_mask + beta * l_align`.
pub fn total_loss(l_gaze: f64, l_mask: f64, l_align: f64, alpha: f64, beta: f64) -> Result<f64> {
    for (name, v) in [("l_gaze", l_gaze), ("l_mask", l_mask), ("l_align", l_align), ("alpha", alpha), ("beta", beta)] {
        if !(v >= 0.0) {
            return Err(GazeError::invalid(format!("{name} must be non-negative, got {v}")));
        }
    }
    Ok(l_gaze + alpha * l_mask + beta * l_align)
}

/// Loss components of one step (or an epoch average).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub l_gaze: f64,
    pub l_mask: f64,
    pub l_align: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_gaze: f64,
    pub l_mask: f64,
    pub l_align: f64,
    pub total: f64,
    pub val_deg: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.6}",
            self.epoch, self.l_gaze, self.l_mask, self.l_align, self.total, self.val_deg
        )
    }
}

/// A whole dataset resident as one `(N, 3, S, S)` tensor.
#[derive(Debug, Clone)]
pub struct TensorDataset {
    images: Tensor,
    labels: Vec<GazeDirection>,
    subjects: Vec<String>,
}

impl TensorDataset {
    pub fn new(images: Tensor, labels: Vec<GazeDirection>, subjects: Vec<String>) -> Result<Self> {
        let n = images.dims().first().copied().unwrap_or(0);
        if images.rank() != 4 || n != labels.len() || n != subjects.len() {
            return Err(GazeError::shape(format!(
                "images {:?} with {} labels and {} subjects",
                images.dims(),
                labels.len(),
                subjects.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            subjects,
        })
    }

    pub fn from_samples(samples: &[LabeledSample], size: usize, dtype: DType, device: &Device) -> Result<Self> {
        let images = images_to_tensor(samples.iter().map(|s| &s.image), size, dtype, device)?;
        Self::new(
            images,
            samples.iter().map(|s| s.label).collect(),
            samples.iter().map(|s| s.subject_id.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[GazeDirection] {
        &self.labels
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<GazeDirection>)> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let t = Tensor::new(ids.as_slice(), self.images.device())?;
        let labels = idx
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| GazeError::invalid(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((self.images.index_select(&t, 0)?, labels))
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use crate::config::RunConfig;
    use rand::{Rng, SeedableRng};

    pub fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "image_size=32".into(),
            "backbone_widths=4,8".into(),
            "backbone_blocks=1,1".into(),
            "feature_dim=8".into(),
            "grid_h=2".into(),
            "grid_w=2".into(),
            "transformer_layers=1".into(),
            "attention_heads=2".into(),
            "ffn_dim=16".into(),
            "backend_embed_dim=6".into(),
            "backend_grid=4".into(),
            "batch_size=4".into(),
            "dtype=f64".into(),
        ])
        .unwrap();
        cfg
    }

    pub fn tiny_model(cfg: &RunConfig) -> GazeModel {
        let backend = cfg.backend_spec().load(&Device::Cpu).unwrap();
        GazeModel::new(cfg, backend).unwrap()
    }

    pub fn tiny_data(cfg: &RunConfig, n: usize) -> TensorDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(n as u64);
        let s = cfg.image_size;
        let v: Vec<f64> = (0..n * 3 * s * s).map(|_| rng.random_range(0.0..1.0)).collect();
        let images = Tensor::from_vec(v, (n, 3, s, s), &Device::Cpu).unwrap();
        let labels = (0..n)
            .map(|_| GazeDirection {
                pitch: rng.random_range(-0.5..0.5),
                yaw: rng.random_range(-0.5..0.5),
            })
            .collect();
        TensorDataset::new(images, labels, vec!["s".into(); n]).unwrap()
    }
}
