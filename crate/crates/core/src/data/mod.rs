//! Labeled image datasets on disk and a synthetic generator.
//!
//! A dataset is a directory holding `labels.txt` plus the images it names.
//! Each non-comment line is `relative_image_path pitch yaw subject_id`, with
//! angles in radians.

mod synthetic;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{GazeError, Result};
use crate::geometry::GazeDirection;

pub use synthetic::{decode_centroid, generate_synthetic, render_sample, SyntheticSpec};

pub const LABELS_FILE: &str = "labels.txt";

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub path: PathBuf,
    pub image: RgbImage,
    pub label: GazeDirection,
    pub subject_id: String,
}

/// Parses the lines of a labels file into `(path, label, subject)` triples.
pub fn parse_labels(text: &str, labels_path: &Path) -> Result<Vec<(String, GazeDirection, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| GazeError::Parse {
            path: labels_path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [file, pitch, yaw, subject] = fields.as_slice() else {
            return Err(err(format!(
                "expected `path pitch yaw subject_id`, got {} fields",
                fields.len()
            )));
        };
        let angle = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad angle {s:?}")))
        };
        out.push((
            file.to_string(),
            GazeDirection {
                pitch: angle(pitch)?,
                yaw: angle(yaw)?,
            },
            subject.to_string(),
        ));
    }
    Ok(out)
}

/// Loads every sample listed in `root/labels.txt`, in file order.
pub fn load_dataset(root: &Path) -> Result<Vec<LabeledSample>> {
    let labels_path = root.join(LABELS_FILE);
    let text = std::fs::read_to_string(&labels_path).map_err(|e| GazeError::Load {
        path: labels_path.clone(),
        reason: e.to_string(),
    })?;
    let entries = parse_labels(&text, &labels_path)?;
    if entries.is_empty() {
        log::warn!("{} lists no samples", labels_path.display());
    }
    entries
        .into_iter()
        .map(|(file, label, subject_id)| {
            let path = root.join(&file);
            let image = image::open(&path)
                .map_err(|e| GazeError::Load {
                    path: path.clone(),
                    reason: e.to_string(),
                })?
                .to_rgb8();
            if image.width() == 0 || image.height() == 0 {
                return Err(GazeError::Load {
                    path,
                    reason: "image is empty".into(),
                });
            }
            Ok(LabeledSample {
                path,
                image,
                label,
                subject_id,
            })
        })
        .collect()
}

/// Writes `labels.txt` for `(file, label, subject)` entries with 6 decimals.
pub fn write_labels(root: &Path, entries: &[(String, GazeDirection, String)]) -> Result<()> {
    let mut text = String::from("# path pitch yaw subject_id\n");
    for (file, g, subject) in entries {
        text.push_str(&format!("{file} {:.6} {:.6} {subject}\n", g.pitch, g.yaw));
    }
    std::fs::write(root.join(LABELS_FILE), text)?;
    Ok(())
}

/// Stacks images into `(B, 3, size, size)` with values in `[0, 1]`,
/// resizing any image of a different resolution.
pub fn images_to_tensor<'a>(
    images: impl IntoIterator<Item = &'a RgbImage>,
    size: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut b = 0;
    for img in images {
        let resized;
        let img = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resized = image::imageops::resize(
                img,
                size as u32,
                size as u32,
                image::imageops::FilterType::Triangle,
            );
            &resized
        };
        let plane = size * size;
        let start = data.len();
        data.resize(start + 3 * plane, 0f32);
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[start + c * plane + i] = f32::from(px[c]) / 255.0;
            }
        }
        b += 1;
    }
    Ok(Tensor::from_vec(data, (b, 3, size, size), device)?.to_dtype(dtype)?)
}

pub fn labels_of(samples: &[LabeledSample]) -> Vec<GazeDirection> {
    samples.iter().map(|s| s.label).collect()
}
