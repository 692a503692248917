//! Training-free gaze estimate from a vision-language backend: cosine
//! similarity between the image and a handful of prototype prompts, used
//! directly as weights on each prototype's gaze bin.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::backend::VisionLanguageBackend;
use crate::error::{GazeError, Result};
use crate::geometry::GazeDirection;
use crate::ops::l2_normalize_rows;

#[derive(Debug, Clone, PartialEq)]
pub struct GazePrototype {
    pub name: String,
    pub bin: GazeDirection,
    pub prompt: String,
}

impl GazePrototype {
    pub fn new(name: &str, pitch: f64, yaw: f64, prompt: &str) -> Self {
        Self {
            name: name.to_string(),
            bin: GazeDirection { pitch, yaw },
            prompt: prompt.to_string(),
        }
    }
}

/// Up, down, left and right, with bins given as (pitch, yaw).
pub fn default_prototypes() -> Vec<GazePrototype> {
    vec![
        GazePrototype::new("up", 0.0, FRAC_PI_2, "A photo of a face gazing up."),
        GazePrototype::new("down", 0.0, -FRAC_PI_2, "A photo of a face gazing down."),
        GazePrototype::new("left", FRAC_PI_2, 0.0, "A photo of a face gazing left."),
        GazePrototype::new("right", -FRAC_PI_2, 0.0, "A photo of a face gazing right."),
    ]
}

/// Parses `name pitch yaw "prompt text"` lines; `#` starts a comment line.
pub fn parse_prototypes(text: &str, path: &Path) -> Result<Vec<GazePrototype>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| GazeError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let (head, prompt) = line
            .split_once('"')
            .ok_or_else(|| err("missing quoted prompt".into()))?;
        let prompt = prompt
            .strip_suffix('"')
            .filter(|p| !p.is_empty())
            .ok_or_else(|| err("prompt must be a non-empty quoted string".into()))?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        let [name, pitch, yaw] = fields.as_slice() else {
            return Err(err(format!("expected `name pitch yaw \"prompt\"`, got {line:?}")));
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad angle {s:?}")))
        };
        out.push(GazePrototype::new(name, num(pitch)?, num(yaw)?, prompt));
    }
    Ok(out)
}

pub fn load_prototypes(path: &Path) -> Result<Vec<GazePrototype>> {
    let text = std::fs::read_to_string(path).map_err(|e| GazeError::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_prototypes(&text, path)
}

/// `(B, K)` cosine similarities between each image and each prototype prompt.
pub fn prototype_similarities(
    images: &Tensor,
    prototypes: &[GazePrototype],
    backend: &dyn VisionLanguageBackend,
) -> Result<Tensor> {
    if prototypes.is_empty() {
        return Err(GazeError::invalid("at least one prototype is required"));
    }
    let text = prototypes
        .iter()
        .map(|p| backend.encode_text(&p.prompt))
        .collect::<Result<Vec<_>>>()?;
    let text = l2_normalize_rows(&Tensor::stack(&text, 0)?.to_dtype(DType::F64)?)?;
    let img = l2_normalize_rows(&backend.encode_image_global(images)?.to_dtype(DType::F64)?)?;
    Ok(img.matmul(&text.t()?)?)
}

/// `sum_j S_j * bin_j` for each row of `similarities`.
pub fn combine_bins(similarities: &[f64], prototypes: &[GazePrototype]) -> Result<GazeDirection> {
    if similarities.len() != prototypes.len() || prototypes.is_empty() {
        return Err(GazeError::shape(format!(
            "{} similarities for {} prototypes",
            similarities.len(),
            prototypes.len()
        )));
    }
    let mut g = GazeDirection::zero();
    for (s, p) in similarities.iter().zip(prototypes) {
        g.pitch += s * p.bin.pitch;
        g.yaw += s * p.bin.yaw;
    }
    Ok(g)
}

/// One estimate per image in `(B, 3, S, S)`.
pub fn probe_gaze(
    images: &Tensor,
    prototypes: &[GazePrototype],
    backend: &dyn VisionLanguageBackend,
) -> Result<Vec<GazeDirection>> {
    let sims = prototype_similarities(images, prototypes, backend)?.to_vec2::<f64>()?;
    sims.iter().map(|s| combine_bins(s, prototypes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{StubBackend, StubConfig};
    use candle_core::Device;
    use std::f64::consts::PI;

    #[test]
    fn default_set_has_the_four_rows() {
        let p = default_prototypes();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0], GazePrototype::new("up", 0.0, PI / 2.0, "A photo of a face gazing up."));
        let sum = p.iter().fold((0.0, 0.0), |a, p| (a.0 + p.bin.pitch, a.1 + p.bin.yaw));
        assert_eq!(sum, (0.0, 0.0));
    }

    #[test]
    fn shipped_prototype_file_matches_the_defaults() {
        let text = include_str!("../data/prototypes.txt");
        assert_eq!(parse_prototypes(text, Path::new("prototypes.txt")).unwrap(), default_prototypes());
    }

    #[test]
    fn prototype_parser_errors_carry_line_numbers() {
        let bad = "up 0 1.0 \"ok\"\nleft x 0 \"bad\"\n";
        match parse_prototypes(bad, Path::new("p")) {
            Err(GazeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_prototypes("up 0 1 no quotes\n", Path::new("p")).is_err());
    }

    #[test]
    fn combination_examples() {
        let p = default_prototypes();
        let g = combine_bins(&[1.0, 0.0, 0.0, 0.0], &p).unwrap();
        assert_eq!((g.pitch, g.yaw), (0.0, PI / 2.0));
        let g = combine_bins(&[0.3; 4], &p).unwrap();
        assert_eq!((g.pitch, g.yaw), (0.0, 0.0));
        let g = combine_bins(&[0.5, 0.1, 0.3, 0.2], &p).unwrap();
        assert!((g.pitch - 0.05 * PI).abs() < 1e-12);
        assert!((g.yaw - 0.2 * PI).abs() < 1e-12);
        assert!(combine_bins(&[1.0], &p).is_err());
    }

    #[test]
    fn pitch_and_yaw_depend_on_opposing_differences() {
        let p = default_prototypes();
        let a = combine_bins(&[0.9, 0.4, 0.7, 0.1], &p).unwrap();
        let b = combine_bins(&[1.2, 0.7, 0.65, 0.05], &p).unwrap();
        assert!((a.pitch - b.pitch).abs() < 1e-12);
        assert!((a.yaw - b.yaw).abs() < 1e-12);
        assert!((a.yaw - (0.9 - 0.4) * PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rigged_stub_gives_the_linear_combination() {
        let p = default_prototypes();
        let d = 6;
        let mut backend = StubBackend::new(
            StubConfig {
                embed_dim: d,
                image_size: 16,
                grid: (2, 2),
                dtype: DType::F64,
                ..StubConfig::default()
            },
            &Device::Cpu,
        )
        .unwrap();
        for (j, proto) in p.iter().enumerate() {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            backend = backend.with_text_embedding(&proto.prompt, e).unwrap();
        }
        let backend = backend
            .with_global_embedding(vec![0.5, 0.1, 0.3, 0.2, 0.61f64.sqrt(), 0.0])
            .unwrap();
        let img = Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let g = probe_gaze(&img, &p, &backend).unwrap();
        assert!((g[0].pitch - 0.05 * PI).abs() < 1e-9);
        assert!((g[0].yaw - 0.2 * PI).abs() < 1e-9);
        assert!(matches!(probe_gaze(&img, &[], &backend), Err(GazeError::InvalidArgument(_))));
    }
}
