use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::Init;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_image_batch, BackendCapabilities, VisionLanguageBackend};
use crate::error::{GazeError, Result};
use crate::ops::{self, derive_seed, ParamStore};

#[derive(Debug, Clone)]
pub struct StubConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub image_size: usize,
    pub grid: (usize, usize),
    pub trainable_image_encoder: bool,
    pub dtype: DType,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            embed_dim: 64,
            image_size: 224,
            grid: (7, 7),
            trainable_image_encoder: true,
            dtype: DType::F32,
        }
    }
}

/// Deterministic stand-in for a pretrained encoder pair.
///
/// The image encoder is a seeded linear patch embedding: every image is cut
/// into `grid` patches, each patch is flattened and projected to `embed_dim`
/// channels. The global embedding is the normalized mean of those tokens.
/// The text encoder hashes `(seed, prompt bytes)` into a Gaussian vector and
/// maps it through a frozen seeded projection.
pub struct StubBackend {
    cfg: StubConfig,
    device: Device,
    patch: (usize, usize),
    image_params: ParamStore,
    text_params: ParamStore,
    patch_proj: candle_nn::Linear,
    text_proj: Tensor,
    text_overrides: HashMap<String, Vec<f64>>,
    global_override: Option<Vec<f64>>,
}

impl StubBackend {
    pub fn new(cfg: StubConfig, device: &Device) -> Result<Self> {
        let (gh, gw) = cfg.grid;
        if cfg.embed_dim == 0 || gh == 0 || gw == 0 {
            return Err(GazeError::config("stub backend dimensions must be positive"));
        }
        if cfg.image_size % gh != 0 || cfg.image_size % gw != 0 {
            return Err(GazeError::config(format!(
                "stub grid {gh}x{gw} does not tile a {0}x{0} image",
                cfg.image_size
            )));
        }
        let patch = (cfg.image_size / gh, cfg.image_size / gw);
        let image_params = ParamStore::new(derive_seed(cfg.seed, b"stub.image"));
        let text_params = ParamStore::new(derive_seed(cfg.seed, b"stub.text"));
        let vb = image_params.builder(cfg.dtype, device);
        let patch_proj =
            candle_nn::linear(3 * patch.0 * patch.1, cfg.embed_dim, vb.pp("patch_embed"))?;
        let text_proj = text_params.builder(cfg.dtype, device).get_with_hints(
            (cfg.embed_dim, cfg.embed_dim),
            "projection",
            Init::Randn {
                mean: 0.0,
                stdev: 1.0 / (cfg.embed_dim as f64).sqrt(),
            },
        )?;
        Ok(Self {
            cfg,
            device: device.clone(),
            patch,
            image_params,
            text_params,
            patch_proj,
            text_proj,
            text_overrides: HashMap::new(),
            global_override: None,
        })
    }

    pub fn config(&self) -> &StubConfig {
        &self.cfg
    }

    /// Pins the embedding returned for `prompt` (normalized on use).
    pub fn with_text_embedding(mut self, prompt: &str, embedding: Vec<f64>) -> Result<Self> {
        self.check_len(&embedding)?;
        self.text_overrides.insert(prompt.to_string(), embedding);
        Ok(self)
    }

    /// Pins the global image embedding returned for every image.
    pub fn with_global_embedding(mut self, embedding: Vec<f64>) -> Result<Self> {
        self.check_len(&embedding)?;
        self.global_override = Some(embedding);
        Ok(self)
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.cfg.embed_dim {
            return Err(GazeError::shape(format!(
                "pinned embedding has {} entries, backend embed_dim is {}",
                v.len(),
                self.cfg.embed_dim
            )));
        }
        Ok(())
    }

    fn unit_row(&self, v: &[f64]) -> Result<Tensor> {
        let t = Tensor::from_vec(v.to_vec(), (1, v.len()), &self.device)?.to_dtype(self.cfg.dtype)?;
        ops::l2_normalize_rows(&t)
    }

    /// Gaussian code vector for a prompt, a pure function of `(seed, bytes)`.
    fn prompt_code(&self, prompt: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, prompt.as_bytes()));
        (0..self.cfg.embed_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let b = check_image_batch(images, self.cfg.image_size)?;
        let (gh, gw) = self.cfg.grid;
        let (ph, pw) = self.patch;
        let x = images
            .to_dtype(self.cfg.dtype)?
            .reshape((b, 3, gh, ph, gw, pw))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, 3 * ph * pw))?;
        Ok(x)
    }
}

impl VisionLanguageBackend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn spatial_grid_shape(&self) -> (usize, usize) {
        self.cfg.grid
    }

    fn spatial_channels(&self) -> usize {
        self.cfg.embed_dim
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_spatial: true,
            trainable_image_encoder: self.cfg.trainable_image_encoder,
            global_is_mean_pooled_spatial: self.global_override.is_none(),
        }
    }

    fn dtype(&self) -> DType {
        self.cfg.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn encode_text(&self, prompt: &str) -> Result<Tensor> {
        if prompt.is_empty() {
            return Err(GazeError::invalid("prompt must be non-empty"));
        }
        if let Some(v) = self.text_overrides.get(prompt) {
            return Ok(self.unit_row(v)?.squeeze(0)?);
        }
        let code = Tensor::from_vec(self.prompt_code(prompt), (self.cfg.embed_dim, 1), &self.device)?
            .to_dtype(self.cfg.dtype)?;
        let e = self.text_proj.matmul(&code)?.t()?;
        Ok(ops::l2_normalize_rows(&e)?.squeeze(0)?.detach())
    }

    fn encode_image_spatial(&self, images: &Tensor) -> Result<Tensor> {
        let patches = self.patchify(images)?;
        let tokens = ops::linear(&patches, &self.patch_proj)?;
        if self.cfg.trainable_image_encoder {
            Ok(tokens)
        } else {
            Ok(tokens.detach())
        }
    }

    fn encode_image_global(&self, images: &Tensor) -> Result<Tensor> {
        if let Some(v) = &self.global_override {
            let b = check_image_batch(images, self.cfg.image_size)?;
            let row = self.unit_row(v)?;
            return Ok(row.broadcast_as((b, v.len()))?.contiguous()?);
        }
        let pooled = self.encode_image_spatial(images)?.mean(D::Minus2)?;
        ops::l2_normalize_rows(&pooled)
    }

    fn image_encoder_params(&self) -> Option<&ParamStore> {
        self.cfg.trainable_image_encoder.then_some(&self.image_params)
    }

    fn text_encoder_params(&self) -> Option<&ParamStore> {
        Some(&self.text_params)
    }
}
