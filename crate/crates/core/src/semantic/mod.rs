//! Language-side supervision: ordered image pairs within a batch, graded
//! gaze-difference prompts, pair embeddings and the contrastive alignment
//! loss against the frozen text encoder.

mod grades;
mod loss;
mod pairs;

use candle_core::Tensor;
use candle_nn::VarBuilder;

use crate::backend::VisionLanguageBackend;
use crate::error::{GazeError, Result};
use crate::geometry::GazeDirection;
use crate::ops::l2_normalize_rows;

pub use grades::{assign_grade, render_prompt, Grade, GradeScheme, DEFAULT_TEMPLATE, GRADE_PLACEHOLDER};
pub use loss::alignment_loss;
pub use pairs::{build_pairs, grade_indices, pair_indices, PairProjector, SamplePair};

/// The `K` grade prompts encoded once, detached, unit-norm `(K, D)`.
#[derive(Debug, Clone)]
pub struct TextEmbeddingCache {
    embeddings: Tensor,
    prompts: Vec<String>,
}

impl TextEmbeddingCache {
    pub fn new(backend: &dyn VisionLanguageBackend, scheme: &GradeScheme) -> Result<Self> {
        let prompts = scheme.prompts();
        let rows = prompts
            .iter()
            .map(|p| backend.encode_text(p))
            .collect::<Result<Vec<_>>>()?;
        let embeddings = l2_normalize_rows(&Tensor::stack(&rows, 0)?)?.detach();
        Ok(Self { embeddings, prompts })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    /// One row per pair, selected by grade.
    pub fn gather(&self, pairs: &[SamplePair]) -> Result<Tensor> {
        if let Some(p) = pairs.iter().find(|p| p.grade_index >= self.prompts.len()) {
            return Err(GazeError::invalid(format!(
                "grade index {} out of range for {} cached prompts",
                p.grade_index,
                self.prompts.len()
            )));
        }
        let idx = grade_indices(pairs, self.embeddings.device())?;
        Ok(self.embeddings.index_select(&idx, 0)?)
    }
}

/// Everything the alignment term needs: scheme, projector, cached prompts
/// and temperature. Dropped entirely for inference.
#[derive(Debug, Clone)]
pub struct SemanticBranch {
    scheme: GradeScheme,
    projector: PairProjector,
    cache: TextEmbeddingCache,
    tau: f64,
}

impl SemanticBranch {
    pub fn new(
        scheme: GradeScheme,
        feature_dim: usize,
        backend: &dyn VisionLanguageBackend,
        tau: f64,
        vb: VarBuilder,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(GazeError::config(format!("tau must be positive, got {tau}")));
        }
        let projector = PairProjector::new(feature_dim, backend.embed_dim(), vb.pp("pair_proj"))?;
        let cache = TextEmbeddingCache::new(backend, &scheme)?;
        Ok(Self {
            scheme,
            projector,
            cache,
            tau,
        })
    }

    pub fn scheme(&self) -> &GradeScheme {
        &self.scheme
    }

    pub fn projector(&self) -> &PairProjector {
        &self.projector
    }

    pub fn cache(&self) -> &TextEmbeddingCache {
        &self.cache
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Alignment loss over all ordered pairs of a batch of `(B, C)` features.
    pub fn loss(&self, features: &Tensor, labels: &[GazeDirection]) -> Result<Tensor> {
        let pairs = build_pairs(labels, &self.scheme)?;
        let pair_embs = self.projector.embed_pairs(features, &pairs)?;
        let text_embs = self.cache.gather(&pairs)?.to_dtype(pair_embs.dtype())?;
        alignment_loss(&pair_embs, &text_embs, self.tau)
    }
}
