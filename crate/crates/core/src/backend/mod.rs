//! Vision-language encoder pair used by the refinement unit, the fusion
//! baselines, the semantic branch and the zero-shot probe.
//!
//! The rest of the crate only talks to [`VisionLanguageBackend`]; concrete
//! encoders are picked with [`BackendSpec::load`].

mod stub;
#[cfg(feature = "pretrained")]
mod pretrained;

use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use crate::error::{GazeError, Result};
use crate::ops::ParamStore;

#[cfg(feature = "pretrained")]
pub use pretrained::PretrainedBackend;
pub use stub::{StubBackend, StubConfig};

/// Environment variable consulted for pretrained weights when no directory
/// is configured.
pub const BACKEND_DIR_ENV: &str = "DCGAZE_BACKEND_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCapabilities {
    pub supports_spatial: bool,
    pub trainable_image_encoder: bool,
    /// `encode_image_global` equals the L2-normalized mean of the spatial tokens.
    pub global_is_mean_pooled_spatial: bool,
}

pub trait VisionLanguageBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Dimension of text embeddings and global image embeddings.
    fn embed_dim(&self) -> usize;

    /// Square input resolution expected by the image encoder.
    fn image_size(&self) -> usize;

    /// `(H', W')` of the spatial token grid.
    fn spatial_grid_shape(&self) -> (usize, usize);

    /// Channel count of the spatial tokens.
    fn spatial_channels(&self) -> usize;

    fn capabilities(&self) -> BackendCapabilities;

    fn dtype(&self) -> DType;

    fn device(&self) -> &Device;

    /// Unit-norm embedding of shape `(embed_dim,)`.
    fn encode_text(&self, prompt: &str) -> Result<Tensor>;

    /// Token grid `(B, H'*W', C_spatial)` for images `(B, 3, S, S)` in `[0, 1]`.
    fn encode_image_spatial(&self, images: &Tensor) -> Result<Tensor>;

    /// Unit-norm rows `(B, embed_dim)`.
    fn encode_image_global(&self, images: &Tensor) -> Result<Tensor>;

    /// Image-encoder parameters that may be fine-tuned.
    fn image_encoder_params(&self) -> Option<&ParamStore>;

    /// Text-encoder parameters. Never handed to an optimizer.
    fn text_encoder_params(&self) -> Option<&ParamStore>;
}

pub type SharedBackend = Arc<dyn VisionLanguageBackend>;

/// Validates an image batch against the configured resolution and returns
/// the batch size.
pub fn check_image_batch(images: &Tensor, size: usize) -> Result<usize> {
    match images.dims() {
        &[b, 3, h, w] if h == size && w == size => Ok(b),
        dims => Err(GazeError::shape(format!(
            "expected images of shape (B, 3, {size}, {size}), got {dims:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Stub,
    Pretrained,
}

impl std::str::FromStr for BackendKind {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(Self::Stub),
            "pretrained" => Ok(Self::Pretrained),
            other => Err(GazeError::config(format!(
                "unknown backend '{other}' (expected stub | pretrained)"
            ))),
        }
    }
}

/// Everything needed to construct a backend.
#[derive(Debug, Clone)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub dir: Option<PathBuf>,
    pub stub: StubConfig,
    pub dtype: DType,
}

impl BackendSpec {
    pub fn load(&self, device: &Device) -> Result<SharedBackend> {
        match self.kind {
            BackendKind::Stub => Ok(Arc::new(StubBackend::new(
                StubConfig {
                    dtype: self.dtype,
                    ..self.stub.clone()
                },
                device,
            )?)),
            BackendKind::Pretrained => self.load_pretrained(device),
        }
    }

    fn resolve_dir(&self) -> Result<PathBuf> {
        let dir = self
            .dir
            .clone()
            .or_else(|| std::env::var_os(BACKEND_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| GazeError::BackendLoad {
                message: "no weights directory configured for the pretrained backend".into(),
                remedy: format!(
                    "set `backend_dir = <path>` in the config or export {BACKEND_DIR_ENV}; \
                     the directory must hold model.safetensors and tokenizer.json"
                ),
            })?;
        if !dir.is_dir() {
            return Err(GazeError::BackendLoad {
                message: format!("{} is not a directory", dir.display()),
                remedy: format!("point backend_dir or {BACKEND_DIR_ENV} at the weights directory"),
            });
        }
        Ok(dir)
    }

    #[cfg(feature = "pretrained")]
    fn load_pretrained(&self, device: &Device) -> Result<SharedBackend> {
        let dir = self.resolve_dir()?;
        Ok(Arc::new(PretrainedBackend::load(&dir, self.dtype, device)?))
    }

    #[cfg(not(feature = "pretrained"))]
    fn load_pretrained(&self, _device: &Device) -> Result<SharedBackend> {
        self.resolve_dir()?;
        Err(GazeError::BackendLoad {
            message: "this build does not include the pretrained encoder".into(),
            remedy: "rebuild with `--features pretrained` (crate dcgaze-core) or use `backend = stub`"
                .into(),
        })
    }
}
