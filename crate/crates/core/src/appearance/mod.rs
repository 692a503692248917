//! Visual appearance branch: feature grids from a convolutional backbone,
//! token aggregation into a per-image feature, the adaptive
//! feature-refinement unit and the fusion baselines it is compared with.

mod afu;
mod aggregator;
mod backbone;
mod fusion;

use candle_core::Tensor;

use crate::error::{GazeError, Result};

pub use afu::{afu_refine, afu_refine_with_maps, self_attention_map, AdaptiveRefinement, AttentionUnit};
pub use aggregator::{Aggregator, AggregatorKind, TransformerAggregator};
pub use backbone::{BackboneConfig, ConvBackbone};
pub use fusion::{fuse_gated, ConcatFusion, CrossAttentionFusion, GatedFusion};

/// A batch of spatial token grids, `(B, H*W, C)` with tokens in row-major
/// `(h, w)` order.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    tokens: Tensor,
    height: usize,
    width: usize,
}

impl FeatureGrid {
    pub fn new(tokens: Tensor, height: usize, width: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3().map_err(|_| {
            GazeError::shape(format!(
                "feature grid must be (B, H*W, C), got {:?}",
                tokens.dims()
            ))
        })?;
        if n != height * width {
            return Err(GazeError::shape(format!(
                "grid has {n} tokens, expected {height}x{width}"
            )));
        }
        Ok(Self {
            tokens,
            height,
            width,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn channels(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    /// Bilinear resize over the spatial axes.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let tokens = crate::ops::resize_tokens(&self.tokens, self.shape(), (height, width))?;
        Self::new(tokens, height, width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Output of the basic extractor (`f^pry`).
    Primary,
    /// Output after refinement or fusion (`f^img`).
    Enhanced,
}

/// A batch of per-image feature vectors `(B, C)`.
#[derive(Debug, Clone)]
pub struct AppearanceFeature {
    pub values: Tensor,
    pub kind: FeatureKind,
}

impl AppearanceFeature {
    pub fn new(values: Tensor, kind: FeatureKind) -> Result<Self> {
        values.dims2().map_err(|_| {
            GazeError::shape(format!(
                "appearance feature must be (B, C), got {:?}",
                values.dims()
            ))
        })?;
        Ok(Self { values, kind })
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }
}

/// Row-stochastic token-mixing weights `(B, N, N)`.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub weights: Tensor,
}
