use candle_core::{Tensor, D};

use crate::error::{GazeError, Result};

/// Symmetric InfoNCE between matched rows of `pair_embs` and `text_embs`
/// (both `(N_p, D)`, unit-norm): the pair-to-text and text-to-pair
/// cross-entropies, each averaged over rows, summed.
pub fn alignment_loss(pair_embs: &Tensor, text_embs: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(GazeError::invalid(format!("tau must be positive, got {tau}")));
    }
    let (n, d) = pair_embs.dims2()?;
    if text_embs.dims() != [n, d] {
        return Err(GazeError::shape(format!(
            "pair embeddings {:?} and text embeddings {:?} differ",
            pair_embs.dims(),
            text_embs.dims()
        )));
    }
    if n == 0 {
        return Err(GazeError::invalid("alignment loss needs at least one pair"));
    }
    let logits = (pair_embs.matmul(&text_embs.t()?)? / tau)?;
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let diag_nll = |lsm: Tensor| -> Result<Tensor> {
        Ok((lsm * &eye)?.sum_all()?.neg()?.affine(1.0 / n as f64, 0.0)?)
    };
    let p2t = diag_nll(candle_nn::ops::log_softmax(&logits, D::Minus1)?)?;
    let t2p = diag_nll(candle_nn::ops::log_softmax(&logits.t()?, D::Minus1)?)?;
    Ok((p2t + t2p)?)
}
