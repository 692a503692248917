use super::model::GazeModel;
use super::TensorDataset;
use crate::error::{GazeError, Result};
use crate::geometry::{angular_error, GazeDirection};
use crate::ops::to_f64_vec;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_deg: f64,
    pub per_sample_deg: Vec<f64>,
    pub predictions: Vec<GazeDirection>,
}

/// Mean of per-sample errors, in degrees.
pub fn summarize(predictions: Vec<GazeDirection>, truths: &[GazeDirection]) -> Result<EvalReport> {
    if truths.is_empty() {
        return Err(GazeError::invalid("cannot evaluate an empty dataset"));
    }
    if predictions.len() != truths.len() {
        return Err(GazeError::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let per_sample_deg = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| angular_error(*p, *t))
        .collect::<Result<Vec<_>>>()?;
    let mean_deg = per_sample_deg.iter().sum::<f64>() / per_sample_deg.len() as f64;
    Ok(EvalReport {
        mean_deg,
        per_sample_deg,
        predictions,
    })
}

/// Runs inference in batches and scores the predictions.
pub fn evaluate(model: &GazeModel, data: &TensorDataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(GazeError::invalid("cannot evaluate an empty dataset"));
    }
    let mut predictions = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(chunk)?;
        predictions.extend(model.infer_directions(&images)?);
    }
    summarize(predictions, data.labels())
}

/// `(B, C)` appearance features row by row.
pub fn extract_features(model: &GazeModel, data: &TensorDataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(chunk)?;
        let f = model.features(&images)?;
        let c = f.dim();
        rows.extend(to_f64_vec(&f.values)?.chunks(c).map(<[f64]>::to_vec));
    }
    Ok(rows)
}
