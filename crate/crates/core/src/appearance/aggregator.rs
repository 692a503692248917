use candle_core::{Module, Tensor, D};
use candle_nn::{Init, VarBuilder};

use super::{AppearanceFeature, FeatureGrid, FeatureKind};
use crate::error::{GazeError, Result};
use crate::ops::{linear, LayerNorm, Mlp};

#[derive(Debug, Clone)]
struct SelfAttention {
    q: candle_nn::Linear,
    k: candle_nn::Linear,
    v: candle_nn::Linear,
    out: candle_nn::Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            q: candle_nn::linear(dim, dim, vb.pp("q"))?,
            k: candle_nn::linear(dim, dim, vb.pp("k"))?,
            v: candle_nn::linear(dim, dim, vb.pp("v"))?,
            out: candle_nn::linear(dim, dim, vb.pp("out"))?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(linear(x, &self.q)?)?;
        let k = split(linear(x, &self.k)?)?;
        let v = split(linear(x, &self.v)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        Ok(linear(&y, &self.out)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    ffn: Mlp,
}

impl EncoderLayer {
    fn new(dim: usize, heads: usize, ffn_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            attn: SelfAttention::new(dim, heads, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            ffn: Mlp::new(&[dim, ffn_dim, dim], vb.pp("ffn"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.ffn.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Pre-norm transformer over `[token; patches] + pos`, reading out row 0.
#[derive(Debug, Clone)]
pub struct TransformerAggregator {
    token: Tensor,
    pos: Tensor,
    layers: Vec<EncoderLayer>,
    dim: usize,
}

impl TransformerAggregator {
    pub fn new(
        dim: usize,
        num_tokens: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(GazeError::config(format!(
                "feature_dim {dim} is not divisible by attention_heads {heads}"
            )));
        }
        let small = Init::Randn {
            mean: 0.0,
            stdev: 0.02,
        };
        let token = vb.get_with_hints((1, dim), "token", small)?;
        let pos = vb.get_with_hints((1 + num_tokens, dim), "pos", small)?;
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(dim, heads, ffn_dim, vb.pp(format!("layer{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token,
            pos,
            layers,
            dim,
        })
    }

    /// Runs the encoder on explicit `token` `(1, C)` and `pos` `(1 + H*W, C)`.
    pub fn aggregate_tokens(&self, grid: &FeatureGrid, token: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let (b, n, c) = grid.tokens().dims3()?;
        if c != self.dim || token.dims() != [1, c] || pos.dims() != [1 + n, c] {
            return Err(GazeError::shape(format!(
                "grid channels {c}, token {:?}, pos {:?} do not match dim {} with {n} patches",
                token.dims(),
                pos.dims(),
                self.dim
            )));
        }
        let cls = token.unsqueeze(0)?.broadcast_as((b, 1, c))?;
        let mut x = Tensor::cat(&[&cls, grid.tokens()], 1)?.broadcast_add(pos)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x.narrow(1, 0, 1)?.squeeze(1)?)
    }

    pub fn token(&self) -> &Tensor {
        &self.token
    }

    pub fn pos(&self) -> &Tensor {
        &self.pos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorKind {
    /// Within-domain: transformer encoder with a learnable aggregation token.
    Transformer {
        layers: usize,
        heads: usize,
        ffn_dim: usize,
    },
    /// Cross-domain: three-layer MLP over the flattened patch tokens.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone)]
pub enum Aggregator {
    Transformer(TransformerAggregator),
    Mlp { mlp: Mlp, num_tokens: usize, dim: usize },
}

impl Aggregator {
    pub fn new(kind: AggregatorKind, dim: usize, num_tokens: usize, vb: VarBuilder) -> Result<Self> {
        match kind {
            AggregatorKind::Transformer {
                layers,
                heads,
                ffn_dim,
            } => Ok(Self::Transformer(TransformerAggregator::new(
                dim, num_tokens, layers, heads, ffn_dim, vb,
            )?)),
            AggregatorKind::Mlp { hidden } => Ok(Self::Mlp {
                mlp: Mlp::new(&[num_tokens * dim, hidden, hidden, dim], vb.pp("mlp"))?,
                num_tokens,
                dim,
            }),
        }
    }

    /// Collapses a grid to one feature per image.
    pub fn aggregate(&self, grid: &FeatureGrid) -> Result<AppearanceFeature> {
        let values = match self {
            Self::Transformer(t) => t.aggregate_tokens(grid, &t.token, &t.pos)?,
            Self::Mlp {
                mlp,
                num_tokens,
                dim,
            } => {
                let (b, n, c) = grid.tokens().dims3()?;
                if (n, c) != (*num_tokens, *dim) {
                    return Err(GazeError::shape(format!(
                        "MLP aggregator expects {num_tokens}x{dim} tokens, got {n}x{c}"
                    )));
                }
                mlp.forward(&grid.tokens().reshape((b, n * c))?)?
            }
        };
        AppearanceFeature::new(values, FeatureKind::Primary)
    }
}
