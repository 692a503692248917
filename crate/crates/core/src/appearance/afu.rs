//! Adaptive feature-refinement unit.
//!
//! Two single-head attention units produce token-mixing maps, one from the
//! pretrained encoder's spatial tokens and one from the backbone grid. Their
//! sum is applied to the backbone tokens: `f_hat = (M_clip + M_gaze) f`.

use candle_core::{Tensor, D};
use candle_nn::VarBuilder;

use super::{AttentionMap, FeatureGrid};
use crate::error::{GazeError, Result};
use crate::ops::linear;

/// `softmax((x Wq^T)(x Wk^T)^T / temperature)` over a batch of grids.
///
/// `wq` and `wk` are `(d, C)` projections applied per token.
pub fn self_attention_map(
    grid: &FeatureGrid,
    wq: &Tensor,
    wk: &Tensor,
    temperature: f64,
) -> Result<AttentionMap> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(GazeError::invalid(format!(
            "attention temperature must be positive, got {temperature}"
        )));
    }
    let c = grid.channels();
    for (name, w) in [("W_Q", wq), ("W_K", wk)] {
        match w.dims() {
            &[_, cin] if cin == c => {}
            dims => {
                return Err(GazeError::shape(format!(
                    "{name} has shape {dims:?}, expected (d, {c})"
                )))
            }
        }
    }
    let q = linear(grid.tokens(), &candle_nn::Linear::new(wq.clone(), None))?;
    let k = linear(grid.tokens(), &candle_nn::Linear::new(wk.clone(), None))?;
    let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / temperature)?;
    Ok(AttentionMap {
        weights: candle_nn::ops::softmax(&scores, D::Minus1)?,
    })
}

/// Applies `(M_clip + M_gaze)` to the primary tokens.
pub fn afu_refine_with_maps(
    primary: &FeatureGrid,
    clip_map: &AttentionMap,
    gaze_map: &AttentionMap,
) -> Result<FeatureGrid> {
    let n = primary.num_tokens();
    for m in [clip_map, gaze_map] {
        let dims = m.weights.dims();
        if dims.len() != 3 || dims[1] != n || dims[2] != n {
            return Err(GazeError::shape(format!(
                "attention map {dims:?} does not match {n} primary tokens"
            )));
        }
    }
    let mask = (&clip_map.weights + &gaze_map.weights)?;
    let tokens = mask.broadcast_matmul(primary.tokens())?;
    FeatureGrid::new(tokens, primary.height(), primary.width())
}

/// A learnable `(W_Q, W_K)` pair producing one attention map.
#[derive(Debug, Clone)]
pub struct AttentionUnit {
    wq: Tensor,
    wk: Tensor,
    temperature: f64,
}

impl AttentionUnit {
    /// `in_dim` is the token channel count, `proj_dim` the query/key width.
    /// `temperature = None` uses `sqrt(proj_dim)`.
    pub fn new(in_dim: usize, proj_dim: usize, temperature: Option<f64>, vb: VarBuilder) -> Result<Self> {
        let wq = candle_nn::linear_no_bias(in_dim, proj_dim, vb.pp("q"))?;
        let wk = candle_nn::linear_no_bias(in_dim, proj_dim, vb.pp("k"))?;
        Ok(Self {
            wq: wq.weight().clone(),
            wk: wk.weight().clone(),
            temperature: temperature.unwrap_or((proj_dim as f64).sqrt()),
        })
    }

    pub fn map(&self, grid: &FeatureGrid) -> Result<AttentionMap> {
        self_attention_map(grid, &self.wq, &self.wk, self.temperature)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Full refinement: attention maps from both grids, prior resized onto the
/// primary grid when the spatial shapes differ.
pub fn afu_refine(
    primary: &FeatureGrid,
    prior: &FeatureGrid,
    clip_unit: &AttentionUnit,
    gaze_unit: &AttentionUnit,
) -> Result<FeatureGrid> {
    let prior = if prior.shape() == primary.shape() {
        prior.clone()
    } else {
        prior.resized(primary.height(), primary.width())?
    };
    if prior.batch() != primary.batch() {
        return Err(GazeError::shape(format!(
            "prior batch {} differs from primary batch {}",
            prior.batch(),
            primary.batch()
        )));
    }
    let m_clip = clip_unit.map(&prior)?;
    let m_gaze = gaze_unit.map(primary)?;
    afu_refine_with_maps(primary, &m_clip, &m_gaze)
}

#[derive(Debug, Clone)]
pub struct AdaptiveRefinement {
    clip_unit: AttentionUnit,
    gaze_unit: AttentionUnit,
}

impl AdaptiveRefinement {
    pub fn new(
        feature_dim: usize,
        prior_channels: usize,
        temperature: Option<f64>,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            clip_unit: AttentionUnit::new(prior_channels, feature_dim, temperature, vb.pp("clip"))?,
            gaze_unit: AttentionUnit::new(feature_dim, feature_dim, temperature, vb.pp("maps"))?,
        })
    }

    pub fn refine(&self, primary: &FeatureGrid, prior: &FeatureGrid) -> Result<FeatureGrid> {
        afu_refine(primary, prior, &self.clip_unit, &self.gaze_unit)
    }
}
