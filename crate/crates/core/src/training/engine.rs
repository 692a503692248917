use std::fs::File;
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{checkpoint_path, save_checkpoint};
use super::evaluate::evaluate;
use super::model::GazeModel;
use super::{total_loss, EpochMetrics, StepMetrics, TensorDataset};
use crate::config::LrSchedule;
use crate::error::{GazeError, Result};
use crate::geometry::GazeDirection;
use crate::ops::{derive_seed, scalar};
use crate::regressor::{directions_to_tensor, gaze_loss, mask_loss, MaskSampler};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const METRICS_HEADER: &str = "epoch,l_gaze,l_mask,l_align,total,val_deg";

fn adamw(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?)
}

/// Owns a model and its optimizers; one instance per training thread.
pub struct Trainer {
    model: GazeModel,
    primary: AdamW,
    image_encoder: Option<AdamW>,
    masks: Option<MaskSampler>,
    step: usize,
}

impl Trainer {
    /// Gaze network and pair projector share one optimizer; the backend image
    /// encoder gets its own (smaller) rate. Text-encoder parameters are never
    /// registered with an optimizer.
    pub fn new(model: GazeModel) -> Result<Self> {
        let cfg = model.config().clone();
        let mut vars = model.params().vars();
        if model.semantic().is_some() {
            vars.extend(model.semantic_params().vars());
        }
        let primary = adamw(vars, cfg.lr)?;
        let image_encoder = match model.backend().image_encoder_params() {
            Some(store) if cfg.finetune_image_encoder && model.uses_image_encoder() => {
                Some(adamw(store.vars(), cfg.image_encoder_lr)?)
            }
            _ => None,
        };
        let masks = if model.has_masked_head() {
            Some(MaskSampler::new(cfg.feature_dim, cfg.drop_ratio, cfg.mask_seed)?)
        } else {
            None
        };
        Ok(Self {
            model,
            primary,
            image_encoder,
            masks,
            step: 0,
        })
    }

    pub fn model(&self) -> &GazeModel {
        &self.model
    }

    pub fn into_model(self) -> GazeModel {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Scales both learning rates relative to their configured values.
    pub fn set_lr_factor(&mut self, factor: f64) {
        let cfg = self.model.config();
        self.primary.set_learning_rate(cfg.lr * factor);
        let enc_lr = cfg.image_encoder_lr * factor;
        if let Some(opt) = &mut self.image_encoder {
            opt.set_learning_rate(enc_lr);
        }
    }

    /// Loss terms for one batch without updating anything.
    pub fn losses(&mut self, images: &Tensor, labels: &[GazeDirection]) -> Result<(Tensor, StepMetrics)> {
        let cfg = self.model.config().clone();
        let (b, ..) = images.dims4()?;
        if b != labels.len() {
            return Err(GazeError::shape(format!("{b} images but {} labels", labels.len())));
        }
        let truths = directions_to_tensor(labels, cfg.dtype, self.model.device())?;
        let masks = match &mut self.masks {
            Some(s) => Some(s.sample(b, cfg.dtype, self.model.device())?),
            None => None,
        };
        let out = self.model.forward_train(images, masks.as_ref())?;
        let l_gaze = gaze_loss(&out.gaze, &truths)?;
        let mut total = l_gaze.clone();
        let mut metrics = StepMetrics {
            l_gaze: scalar(&l_gaze)?,
            ..StepMetrics::default()
        };
        if let Some(masked) = &out.masked_gaze {
            let l_mask = mask_loss(masked, &truths)?;
            metrics.l_mask = scalar(&l_mask)?;
            total = (total + (l_mask * cfg.alpha)?)?;
        }
        if let Some(semantic) = self.model.semantic() {
            let l_align = semantic.loss(&out.features.values, labels)?;
            metrics.l_align = scalar(&l_align)?;
            total = (total + (l_align * cfg.beta)?)?;
        }
        metrics.total = scalar(&total)?;
        if ![metrics.l_gaze, metrics.l_mask, metrics.l_align, metrics.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(GazeError::NonFiniteLoss {
                step: self.step,
                l_gaze: metrics.l_gaze,
                l_mask: metrics.l_mask,
                l_align: metrics.l_align,
                total: metrics.total,
            });
        }
        total_loss(metrics.l_gaze, metrics.l_mask, metrics.l_align, cfg.alpha, cfg.beta)?;
        Ok((total, metrics))
    }

    /// One optimizer update on a batch.
    pub fn train_step(&mut self, images: &Tensor, labels: &[GazeDirection]) -> Result<StepMetrics> {
        let (total, metrics) = self.losses(images, labels)?;
        let grads = total.backward()?;
        self.primary.step(&grads)?;
        if let Some(opt) = &mut self.image_encoder {
            opt.step(&grads)?;
        }
        self.step += 1;
        Ok(metrics)
    }

    /// A finite loss can still produce an update that overflows the weights.
    fn check_parameters(&self) -> Result<()> {
        for store in [self.model.params(), self.model.semantic_params()] {
            for (name, var) in store.named_vars() {
                if !scalar(&var.as_tensor().abs()?.sum_all()?)?.is_finite() {
                    return Err(GazeError::NonFiniteParameter { step: self.step, name });
                }
            }
        }
        Ok(())
    }

    /// Index batches for one epoch. With `shuffle` the order is redrawn each
    /// epoch; without it every epoch reuses the epoch-0 permutation. A
    /// trailing batch of one sample is merged into the previous batch so
    /// pair construction always has at least two samples.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let cfg = self.model.config();
        let draw = if cfg.shuffle { epoch as u64 } else { 0 };
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.data_seed, &draw.to_le_bytes()));
        idx.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().unwrap_or_default();
            if let Some(prev) = batches.last_mut() {
                prev.extend(last);
            }
        }
        batches
    }

    /// Runs one epoch (0-based) and returns sample-weighted mean losses.
    pub fn train_epoch(&mut self, data: &TensorDataset, epoch: usize) -> Result<StepMetrics> {
        let cfg = self.model.config().clone();
        if data.len() < 2 && self.model.semantic().is_some() {
            return Err(GazeError::config(
                "pair alignment needs at least 2 training samples",
            ));
        }
        if data.is_empty() {
            return Err(GazeError::invalid("training set is empty"));
        }
        if cfg.lr_schedule == LrSchedule::Cosine && cfg.epochs > 0 {
            let t = epoch as f64 / cfg.epochs as f64;
            self.set_lr_factor(0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
        }
        let mut sum = StepMetrics::default();
        for batch in self.epoch_batches(data.len(), epoch) {
            let (images, labels) = data.batch(&batch)?;
            let m = self.train_step(&images, &labels)?;
            let w = batch.len() as f64;
            sum.l_gaze += w * m.l_gaze;
            sum.l_mask += w * m.l_mask;
            sum.l_align += w * m.l_align;
            sum.total += w * m.total;
        }
        self.check_parameters()?;
        let n = data.len() as f64;
        Ok(StepMetrics {
            l_gaze: sum.l_gaze / n,
            l_mask: sum.l_mask / n,
            l_align: sum.l_align / n,
            total: sum.total / n,
        })
    }

    /// Trains for the configured epochs. With `run_dir`, echoes the config,
    /// appends one metrics row per epoch and writes checkpoints.
    pub fn fit(
        &mut self,
        train: &TensorDataset,
        val: Option<&TensorDataset>,
        run_dir: Option<&Path>,
    ) -> Result<Vec<EpochMetrics>> {
        let cfg = self.model.config().clone();
        let mut csv = match run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(CONFIG_ECHO_FILE), cfg.render())?;
                let mut f = File::create(dir.join(METRICS_FILE))?;
                writeln!(f, "{METRICS_HEADER}")?;
                Some(f)
            }
            None => None,
        };
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let losses = self.train_epoch(train, epoch)?;
            let val_deg = evaluate(&self.model, val.unwrap_or(train), cfg.batch_size)?.mean_deg;
            let m = EpochMetrics {
                epoch: epoch + 1,
                l_gaze: losses.l_gaze,
                l_mask: losses.l_mask,
                l_align: losses.l_align,
                total: losses.total,
                val_deg,
            };
            log::info!(
                "epoch {:>4}  l_gaze {:.5}  l_mask {:.5}  l_align {:.5}  total {:.5}  val {:.3} deg",
                m.epoch,
                m.l_gaze,
                m.l_mask,
                m.l_align,
                m.total,
                m.val_deg
            );
            if let Some(f) = &mut csv {
                writeln!(f, "{}", m.csv_row())?;
                f.flush()?;
            }
            if let Some(dir) = run_dir {
                let last = epoch + 1 == cfg.epochs;
                if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                    save_checkpoint(&self.model, &checkpoint_path(dir, epoch + 1), epoch + 1, Some(&m))?;
                }
            }
            history.push(m);
        }
        Ok(history)
    }
}
