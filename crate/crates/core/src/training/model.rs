use candle_core::{DType, Device, Tensor};

use crate::appearance::{
    AdaptiveRefinement, Aggregator, AppearanceFeature, ConcatFusion, ConvBackbone,
    CrossAttentionFusion, FeatureGrid, FeatureKind, GatedFusion,
};
use crate::backend::SharedBackend;
use crate::config::{FusionKind, RunConfig};
use crate::error::{GazeError, Result};
use crate::geometry::GazeDirection;
use crate::ops::{derive_seed, ParamStore};
use crate::regressor::{check_masked_head_dim, masked_head, tensor_to_directions, MlpHead};
use crate::semantic::SemanticBranch;

#[derive(Debug, Clone)]
enum Fusion {
    None,
    Afu(AdaptiveRefinement),
    Concat(ConcatFusion),
    CrossAttention(CrossAttentionFusion),
    Gated(GatedFusion),
}

/// Outputs of one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub features: AppearanceFeature,
    pub gaze: Tensor,
    pub masked_gaze: Option<Tensor>,
}

/// The gaze network plus its training-only attachments (semantic branch and
/// masked head).
#[derive(Clone)]
pub struct GazeModel {
    cfg: RunConfig,
    backend: SharedBackend,
    params: ParamStore,
    semantic_params: ParamStore,
    backbone: ConvBackbone,
    aggregator: Aggregator,
    fusion: Fusion,
    head: MlpHead,
    semantic: Option<SemanticBranch>,
    masked_head: bool,
}

impl GazeModel {
    pub fn new(cfg: &RunConfig, backend: SharedBackend) -> Result<Self> {
        cfg.validate()?;
        if backend.image_size() != cfg.image_size {
            return Err(GazeError::config(format!(
                "backend '{}' expects {0}x{0} images but image_size is {1}",
                backend.image_size(),
                cfg.image_size
            )));
        }
        let device = backend.device().clone();
        let dtype = cfg.dtype;
        let params = ParamStore::new(cfg.seed);
        let semantic_params = ParamStore::new(derive_seed(cfg.seed, b"semantic"));
        let vb = params.builder(dtype, &device);
        let c = cfg.feature_dim;
        let backbone = ConvBackbone::new(cfg.backbone_config(), vb.pp("backbone"))?;
        let aggregator = Aggregator::new(
            cfg.aggregator_kind(),
            c,
            cfg.grid_h * cfg.grid_w,
            vb.pp("aggregator"),
        )?;
        let fusion = match cfg.effective_fusion() {
            FusionKind::None => Fusion::None,
            kind => {
                if !backend.capabilities().supports_spatial
                    && matches!(kind, FusionKind::Afu | FusionKind::CrossAttention)
                {
                    return Err(GazeError::config(format!(
                        "fusion {:?} needs spatial tokens, which backend '{}' does not provide",
                        kind,
                        backend.name()
                    )));
                }
                let vb = vb.pp("fusion");
                let t = cfg.attention_temperature;
                match kind {
                    FusionKind::Afu => Fusion::Afu(AdaptiveRefinement::new(c, backend.spatial_channels(), t, vb)?),
                    FusionKind::Concat => Fusion::Concat(ConcatFusion::new(c, backend.embed_dim(), vb)?),
                    FusionKind::CrossAttention => Fusion::CrossAttention(CrossAttentionFusion::new(
                        c,
                        backend.spatial_channels(),
                        t,
                        vb,
                    )?),
                    FusionKind::Gated => Fusion::Gated(GatedFusion::new(c, backend.embed_dim(), vb)?),
                    FusionKind::None => unreachable!(),
                }
            }
        };
        let head = MlpHead::new(c, vb.pp("head"))?;
        if cfg.use_dgr {
            check_masked_head_dim(c)?;
        }
        let semantic = if cfg.use_dctrain {
            Some(SemanticBranch::new(
                cfg.grade_scheme()?,
                c,
                backend.as_ref(),
                cfg.tau,
                semantic_params.builder(dtype, &device),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            backend,
            params,
            semantic_params,
            backbone,
            aggregator,
            fusion,
            head,
            semantic,
            masked_head: cfg.use_dgr,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &SharedBackend {
        &self.backend
    }

    pub fn device(&self) -> &Device {
        self.backend.device()
    }

    pub fn dtype(&self) -> DType {
        self.cfg.dtype
    }

    /// Parameters of the gaze network (backbone, aggregator, fusion, head).
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Parameters of the pair projector.
    pub fn semantic_params(&self) -> &ParamStore {
        &self.semantic_params
    }

    pub fn semantic(&self) -> Option<&SemanticBranch> {
        self.semantic.as_ref()
    }

    pub fn has_masked_head(&self) -> bool {
        self.masked_head
    }

    /// Whether the forward pass reads the backend image encoder.
    pub fn uses_image_encoder(&self) -> bool {
        !matches!(self.fusion, Fusion::None)
    }

    pub fn head(&self) -> &MlpHead {
        &self.head
    }

    /// Drops the semantic branch and the masked head.
    pub fn into_inference(mut self) -> Self {
        self.semantic = None;
        self.masked_head = false;
        self
    }

    fn prior_grid(&self, images: &Tensor) -> Result<FeatureGrid> {
        let (h, w) = self.backend.spatial_grid_shape();
        let tokens = self.backend.encode_image_spatial(images)?.to_dtype(self.dtype())?;
        FeatureGrid::new(tokens, h, w)
    }

    fn global_prior(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.backend.encode_image_global(images)?.to_dtype(self.dtype())?)
    }

    /// The appearance feature fed to the heads: enhanced when a prior is
    /// fused, primary otherwise.
    pub fn features(&self, images: &Tensor) -> Result<AppearanceFeature> {
        let images = images.to_dtype(self.dtype())?;
        let grid = self.backbone.extract_feature_grid(&images)?;
        match &self.fusion {
            Fusion::None => self.aggregator.aggregate(&grid),
            Fusion::Afu(afu) => {
                let refined = afu.refine(&grid, &self.prior_grid(&images)?)?;
                let f = self.aggregator.aggregate(&refined)?;
                AppearanceFeature::new(f.values, FeatureKind::Enhanced)
            }
            Fusion::Concat(c) => c.fuse(&self.aggregator.aggregate(&grid)?, &self.global_prior(&images)?),
            Fusion::CrossAttention(x) => {
                let prior = self.prior_grid(&images)?;
                x.fuse(&self.aggregator.aggregate(&grid)?, prior.tokens())
            }
            Fusion::Gated(g) => g.fuse(&self.aggregator.aggregate(&grid)?, &self.global_prior(&images)?),
        }
    }

    /// `(B, 2)` gaze from the MLP head. No randomness is involved.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.features(images)?)
    }

    pub fn infer_directions(&self, images: &Tensor) -> Result<Vec<GazeDirection>> {
        tensor_to_directions(&self.infer(images)?)
    }

    /// Forward pass with the masked head applied when `masks` is given and
    /// the head is attached.
    pub fn forward_train(&self, images: &Tensor, masks: Option<&Tensor>) -> Result<TrainForward> {
        let features = self.features(images)?;
        let gaze = self.head.forward(&features)?;
        let masked_gaze = match (self.masked_head, masks) {
            (true, Some(m)) => Some(masked_head(&features, m)?),
            _ => None,
        };
        Ok(TrainForward {
            features,
            gaze,
            masked_gaze,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;
    use crate::training::test_util::tiny_config;

    fn model(cfg: &RunConfig) -> GazeModel {
        let backend = cfg.backend_spec().load(&Device::Cpu).unwrap();
        GazeModel::new(cfg, backend).unwrap()
    }

    #[test]
    fn every_fusion_variant_produces_gaze() {
        for fusion in ["afu", "concat", "cross_attention", "gated", "none"] {
            let mut cfg = tiny_config();
            cfg.set("fusion", fusion).unwrap();
            let m = model(&cfg);
            let img = Tensor::rand(0f64, 1.0, (3, 3, 32, 32), &Device::Cpu).unwrap();
            let out = m.infer(&img).unwrap();
            assert_eq!(out.dims(), &[3, 2], "{fusion}");
            assert!(to_f64_vec(&out).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn cross_domain_mode_uses_the_mlp_aggregator() {
        let mut cfg = tiny_config();
        cfg.set("mode", "cross_domain").unwrap();
        cfg.set("mlp_hidden", "12").unwrap();
        let m = model(&cfg);
        assert!(m.params().named_vars().iter().any(|(n, _)| n.starts_with("aggregator.mlp")));
        let img = Tensor::rand(0f64, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        assert_eq!(m.infer(&img).unwrap().dims(), &[2, 2]);
    }

    #[test]
    fn pruned_model_infers_identically() {
        let cfg = tiny_config();
        let m = model(&cfg);
        let img = Tensor::rand(0f64, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let full = to_f64_vec(&m.infer(&img).unwrap()).unwrap();
        let pruned = m.clone().into_inference();
        assert!(pruned.semantic().is_none() && !pruned.has_masked_head());
        assert_eq!(to_f64_vec(&pruned.infer(&img).unwrap()).unwrap(), full);
    }

    #[test]
    fn image_size_must_match_the_backend() {
        let cfg = tiny_config();
        let mut other = cfg.clone();
        other.set("image_size", "64").unwrap();
        let backend = other.backend_spec().load(&Device::Cpu).unwrap();
        assert!(matches!(GazeModel::new(&cfg, backend), Err(GazeError::Config(_))));
    }
}
