use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::write_labels;
use crate::error::{GazeError, Result};
use crate::geometry::GazeDirection;

const BACKGROUND: f64 = 40.0;
const BLOB: f64 = 220.0;
const LABEL_RANGE: f64 = 0.5;
/// Blob displacement at `|angle| = LABEL_RANGE`, as a fraction of the side.
const MAX_SHIFT: f64 = 0.3;
const SEMI_X: f64 = 0.14;
const SEMI_Y: f64 = 0.09;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise as a fraction of 255.
    pub noise_level: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 64,
            image_size: 224,
            seed: 0,
            noise_level: 0.0,
        }
    }
}

fn pixels_per_radian(size: usize) -> f64 {
    MAX_SHIFT * size as f64 / LABEL_RANGE
}

/// Draws a bright ellipse on a dark background, shifted right by yaw and up
/// by pitch, antialiased by supersampling, plus Gaussian noise.
pub fn render_sample(label: GazeDirection, size: usize, noise_level: f64, rng: &mut impl Rng) -> RgbImage {
    let k = pixels_per_radian(size);
    let s = size as f64;
    let cx = s / 2.0 + k * label.yaw;
    let cy = s / 2.0 - k * label.pitch;
    let (ax, ay) = (SEMI_X * s, SEMI_Y * s);
    let noise = Normal::new(0.0, noise_level.max(0.0) * 255.0).expect("finite noise level");
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let mut inside = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let dx = (px - cx) / ax;
                    let dy = (py - cy) / ay;
                    if dx * dx + dy * dy <= 1.0 {
                        inside += 1;
                    }
                }
            }
            let cover = inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let mut v = BACKGROUND + (BLOB - BACKGROUND) * cover;
            if noise_level > 0.0 {
                v += noise.sample(rng);
            }
            let v = v.round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
    }
    img
}

/// Recovers a label from the brightness-weighted centroid above background.
pub fn decode_centroid(img: &RgbImage) -> GazeDirection {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (x, y, px) in img.enumerate_pixels() {
        let v = (f64::from(px[0]) + f64::from(px[1]) + f64::from(px[2])) / 3.0;
        let w = (v - BACKGROUND).max(0.0);
        sw += w;
        sx += w * (x as f64 + 0.5);
        sy += w * (y as f64 + 0.5);
    }
    if sw == 0.0 {
        return GazeDirection::zero();
    }
    let size = img.width() as f64;
    let k = pixels_per_radian(img.width() as usize);
    GazeDirection {
        pitch: -(sy / sw - size / 2.0) / k,
        yaw: (sx / sw - size / 2.0) / k,
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Writes `spec.count` PNGs plus `labels.txt` into `out`; returns the entries.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Vec<(String, GazeDirection, String)>> {
    if spec.count == 0 {
        return Err(GazeError::invalid("synthetic count must be at least 1"));
    }
    if spec.image_size < 8 {
        return Err(GazeError::invalid(format!(
            "synthetic image size must be at least 8, got {}",
            spec.image_size
        )));
    }
    if !(spec.noise_level >= 0.0) || !spec.noise_level.is_finite() {
        return Err(GazeError::invalid(format!(
            "noise level must be finite and non-negative, got {}",
            spec.noise_level
        )));
    }
    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let label = GazeDirection {
            pitch: round6(rng.random_range(-LABEL_RANGE..=LABEL_RANGE)),
            yaw: round6(rng.random_range(-LABEL_RANGE..=LABEL_RANGE)),
        };
        let img = render_sample(label, spec.image_size, spec.noise_level, &mut rng);
        let file = format!("img_{i:05}.png");
        img.save(out.join(&file))?;
        entries.push((file, label, format!("s{:02}", i % 4)));
    }
    write_labels(out, &entries)?;
    Ok(entries)
}
