use candle_core::{Device, Module, Tensor};
use candle_nn::VarBuilder;

use super::GradeScheme;
use crate::error::{GazeError, Result};
use crate::geometry::{gaze_l1_difference, GazeDirection};
use crate::ops::{l2_normalize_rows, Mlp};

/// An ordered pair of batch indices with its graded gaze difference.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub i: usize,
    pub j: usize,
    pub diff: f64,
    pub grade_index: usize,
    pub prompt: String,
}

/// Every ordered `(i, j)` with `i != j`, row-major in `i`.
pub fn build_pairs(labels: &[GazeDirection], scheme: &GradeScheme) -> Result<Vec<SamplePair>> {
    let n = labels.len();
    if n < 2 {
        return Err(GazeError::invalid(format!(
            "pair construction needs at least 2 samples, got {n}"
        )));
    }
    let prompts = scheme.prompts();
    let mut pairs = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let diff = gaze_l1_difference(labels[i], labels[j])?;
            let grade_index = scheme.assign_grade(diff)?;
            pairs.push(SamplePair {
                i,
                j,
                diff,
                grade_index,
                prompt: prompts[grade_index].clone(),
            });
        }
    }
    Ok(pairs)
}

/// `(first, second)` index tensors for gathering pair members from a batch.
pub fn pair_indices(pairs: &[SamplePair], device: &Device) -> Result<(Tensor, Tensor)> {
    let i: Vec<u32> = pairs.iter().map(|p| p.i as u32).collect();
    let j: Vec<u32> = pairs.iter().map(|p| p.j as u32).collect();
    Ok((Tensor::new(i.as_slice(), device)?, Tensor::new(j.as_slice(), device)?))
}

pub fn grade_indices(pairs: &[SamplePair], device: &Device) -> Result<Tensor> {
    let g: Vec<u32> = pairs.iter().map(|p| p.grade_index as u32).collect();
    Ok(Tensor::new(g.as_slice(), device)?)
}

/// MLP from a concatenated feature pair `[f_i; f_j]` (`2C`) to the text
/// embedding space (`D`).
#[derive(Debug, Clone)]
pub struct PairProjector {
    mlp: Mlp,
}

impl PairProjector {
    /// Layout `2C -> D -> D`.
    pub fn new(feature_dim: usize, embed_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&[2 * feature_dim, embed_dim, embed_dim], vb)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.in_dim() / 2
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Unnormalized projection of `[first; second]`, both `(N, C)`.
    pub fn project(&self, first: &Tensor, second: &Tensor) -> Result<Tensor> {
        let c = self.feature_dim();
        if first.dims() != second.dims() || first.dims().get(1) != Some(&c) || first.rank() != 2 {
            return Err(GazeError::shape(format!(
                "pair members must both be (N, {c}), got {:?} and {:?}",
                first.dims(),
                second.dims()
            )));
        }
        Ok(self.mlp.forward(&Tensor::cat(&[first, second], 1)?)?)
    }

    /// Unit-norm `(N_p, D)` embeddings for `pairs` drawn from `(B, C)` features.
    pub fn embed_pairs(&self, features: &Tensor, pairs: &[SamplePair]) -> Result<Tensor> {
        let (first, second) = pair_indices(pairs, features.device())?;
        let features = features.contiguous()?;
        let raw = self.project(
            &features.index_select(&first, 0)?,
            &features.index_select(&second, 0)?,
        )?;
        l2_normalize_rows(&raw)
    }
}
