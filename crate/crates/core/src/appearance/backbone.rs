use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};

use super::FeatureGrid;
use crate::backend::check_image_batch;
use crate::ops::max_pool_2x2;
use crate::error::{GazeError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    /// Output channels of the stem and of each residual stage.
    pub widths: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    /// Channels of the emitted grid (`C`).
    pub feature_dim: usize,
    /// `(H, W)` of the emitted grid.
    pub grid: (usize, usize),
}

impl BackboneConfig {
    /// ResNet18 layout: 224 input, four stages, 7x7x32 grid.
    pub fn resnet18() -> Self {
        Self {
            image_size: 224,
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
            feature_dim: 32,
            grid: (7, 7),
        }
    }

    /// Spatial side length produced by the convolution stack before any resize.
    pub fn native_side(&self) -> usize {
        // stem conv /2, max-pool /2, then /2 at every stage after the first
        let half = |n: usize| n.div_ceil(2);
        let mut side = half(self.image_size) / 2;
        for _ in 1..self.widths.len() {
            side = half(side);
        }
        side
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, k, cfg, vb)?)
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some(conv(cin, cout, 1, stride, vb.pp("shortcut"))?)
        } else {
            None
        };
        Ok(Self {
            conv1: conv(cin, cout, 3, stride, vb.pp("conv1"))?,
            conv2: conv(cout, cout, 3, 1, vb.pp("conv2"))?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Residual convolutional feature extractor (ResNet-style, without batch
/// statistics so training and inference compute the same function).
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    cfg: BackboneConfig,
    stem: Conv2d,
    stages: Vec<Vec<BasicBlock>>,
    proj: Conv2d,
}

impl ConvBackbone {
    pub fn new(cfg: BackboneConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.len() != cfg.blocks.len() {
            return Err(GazeError::config(format!(
                "backbone widths {:?} and blocks {:?} must be non-empty and equally long",
                cfg.widths, cfg.blocks
            )));
        }
        if cfg.native_side() == 0 {
            return Err(GazeError::config(format!(
                "image size {} is too small for {} stages",
                cfg.image_size,
                cfg.widths.len()
            )));
        }
        let stem = conv(3, cfg.widths[0], 7, 2, vb.pp("stem"))?;
        let mut stages = Vec::with_capacity(cfg.widths.len());
        let mut cin = cfg.widths[0];
        for (s, (&width, &count)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
            let vs = vb.pp(format!("stage{s}"));
            let mut blocks = Vec::with_capacity(count);
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, width, stride, vs.pp(b.to_string()))?);
                cin = width;
            }
            stages.push(blocks);
        }
        let proj = conv(cin, cfg.feature_dim, 1, 1, vb.pp("proj"))?;
        Ok(Self {
            cfg,
            stem,
            stages,
            proj,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `(B, 3, S, S)` images to a `(B, H*W, C)` grid at the configured size.
    pub fn extract_feature_grid(&self, images: &Tensor) -> Result<FeatureGrid> {
        let b = check_image_batch(images, self.cfg.image_size)?;
        let mut x = max_pool_2x2(&self.stem.forward(images)?.relu()?)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
        }
        let x = self.proj.forward(&x)?;
        let (_, c, h, w) = x.dims4()?;
        let tokens = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let grid = FeatureGrid::new(tokens, h, w)?;
        let (gh, gw) = self.cfg.grid;
        if (h, w) == (gh, gw) {
            Ok(grid)
        } else {
            grid.resized(gh, gw)
        }
    }
}
