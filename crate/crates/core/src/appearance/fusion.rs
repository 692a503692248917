//! Fusion baselines that combine the primary feature with an encoder prior
//! without the refinement unit.

use candle_core::{Tensor, D};
use candle_nn::VarBuilder;

use super::{AppearanceFeature, FeatureKind};
use crate::error::{GazeError, Result};
use crate::ops::linear;

fn check_batch(primary: &AppearanceFeature, prior: &Tensor) -> Result<usize> {
    let b = primary.values.dim(0)?;
    if prior.dim(0)? != b {
        return Err(GazeError::shape(format!(
            "prior batch {:?} does not match primary batch {b}",
            prior.dims()
        )));
    }
    Ok(b)
}

/// `Linear([primary; prior])` back to `C` dimensions.
#[derive(Debug, Clone)]
pub struct ConcatFusion {
    layer: candle_nn::Linear,
    feature_dim: usize,
    prior_dim: usize,
}

impl ConcatFusion {
    pub fn new(feature_dim: usize, prior_dim: usize, vb: VarBuilder) -> Result<Self> {
        let layer = candle_nn::linear(feature_dim + prior_dim, feature_dim, vb.pp("fc"))?;
        Ok(Self::from_layer(layer, feature_dim, prior_dim))
    }

    /// Weight is `(C, C + D)` with the primary block first.
    pub fn from_layer(layer: candle_nn::Linear, feature_dim: usize, prior_dim: usize) -> Self {
        Self {
            layer,
            feature_dim,
            prior_dim,
        }
    }

    /// `prior` is a `(B, D)` embedding.
    pub fn fuse(&self, primary: &AppearanceFeature, prior: &Tensor) -> Result<AppearanceFeature> {
        check_batch(primary, prior)?;
        if primary.dim() != self.feature_dim || prior.dims().get(1) != Some(&self.prior_dim) {
            return Err(GazeError::shape(format!(
                "concat fusion expects ({}, {}) inputs, got {} and {:?}",
                self.feature_dim,
                self.prior_dim,
                primary.dim(),
                prior.dims()
            )));
        }
        let x = Tensor::cat(&[&primary.values, prior], 1)?;
        AppearanceFeature::new(linear(&x, &self.layer)?, FeatureKind::Enhanced)
    }
}

/// Primary feature as the query over the prior's tokens.
#[derive(Debug, Clone)]
pub struct CrossAttentionFusion {
    q: candle_nn::Linear,
    k: candle_nn::Linear,
    v: candle_nn::Linear,
    temperature: f64,
}

impl CrossAttentionFusion {
    /// `temperature = None` uses `sqrt(feature_dim)`.
    pub fn new(
        feature_dim: usize,
        prior_channels: usize,
        temperature: Option<f64>,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self::from_projections(
            candle_nn::linear_no_bias(feature_dim, feature_dim, vb.pp("q"))?,
            candle_nn::linear_no_bias(prior_channels, feature_dim, vb.pp("k"))?,
            candle_nn::linear_no_bias(prior_channels, feature_dim, vb.pp("v"))?,
            temperature.unwrap_or((feature_dim as f64).sqrt()),
        ))
    }

    pub fn from_projections(
        q: candle_nn::Linear,
        k: candle_nn::Linear,
        v: candle_nn::Linear,
        temperature: f64,
    ) -> Self {
        Self { q, k, v, temperature }
    }

    /// `prior` is `(B, T, D')` tokens or a `(B, D')` single token.
    pub fn fuse(&self, primary: &AppearanceFeature, prior: &Tensor) -> Result<AppearanceFeature> {
        if !(self.temperature > 0.0) {
            return Err(GazeError::invalid(format!(
                "attention temperature must be positive, got {}",
                self.temperature
            )));
        }
        check_batch(primary, prior)?;
        let prior = match prior.rank() {
            2 => prior.unsqueeze(1)?,
            3 => prior.clone(),
            _ => {
                return Err(GazeError::shape(format!(
                    "prior must be (B, D) or (B, T, D), got {:?}",
                    prior.dims()
                )))
            }
        };
        let want_in = self.k.weight().dim(1)?;
        if prior.dim(2)? != want_in || primary.dim() != self.q.weight().dim(1)? {
            return Err(GazeError::shape(format!(
                "cross-attention expects primary {} and prior channels {want_in}, got {} and {:?}",
                self.q.weight().dim(1)?,
                primary.dim(),
                prior.dims()
            )));
        }
        let q = linear(&primary.values, &self.q)?.unsqueeze(1)?;
        let k = linear(&prior, &self.k)?;
        let v = linear(&prior, &self.v)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / self.temperature)?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = att.matmul(&v)?.squeeze(1)?;
        AppearanceFeature::new(out, FeatureKind::Enhanced)
    }
}

/// `primary * sigmoid(gate)` elementwise.
pub fn fuse_gated(primary: &AppearanceFeature, gate: &Tensor) -> Result<AppearanceFeature> {
    if gate.dims() != primary.values.dims() {
        return Err(GazeError::shape(format!(
            "gate {:?} does not match primary {:?}",
            gate.dims(),
            primary.values.dims()
        )));
    }
    // 1 / (1 + exp(-x)) from primitives so every dtype has a backward pass
    let sig = (gate.neg()?.exp()? + 1.0)?.recip()?;
    AppearanceFeature::new((&primary.values * sig)?, FeatureKind::Enhanced)
}

/// Gated fusion with the `(B, D)` prior projected to `C` dimensions first.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    proj: candle_nn::Linear,
}

impl GatedFusion {
    pub fn new(feature_dim: usize, prior_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            proj: candle_nn::linear(prior_dim, feature_dim, vb.pp("proj"))?,
        })
    }

    pub fn fuse(&self, primary: &AppearanceFeature, prior: &Tensor) -> Result<AppearanceFeature> {
        check_batch(primary, prior)?;
        if prior.rank() != 2 || prior.dim(1)? != self.proj.weight().dim(1)? {
            return Err(GazeError::shape(format!(
                "gated fusion expects a (B, {}) prior, got {:?}",
                self.proj.weight().dim(1)?,
                prior.dims()
            )));
        }
        fuse_gated(primary, &linear(prior, &self.proj)?)
    }
}
