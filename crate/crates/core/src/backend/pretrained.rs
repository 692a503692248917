//! CLIP encoder pair loaded from a Hugging Face style directory
//! (`model.safetensors` + `tokenizer.json`).

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Module, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::{
    text_model::ClipTextTransformer, vision_model::ClipVisionTransformer, ClipConfig,
};
use tokenizers::Tokenizer;

use super::{check_image_batch, BackendCapabilities, VisionLanguageBackend};
use crate::error::{GazeError, Result};
use crate::ops::{self, ParamStore};

const MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

pub struct PretrainedBackend {
    config: ClipConfig,
    vision: ClipVisionTransformer,
    text: ClipTextTransformer,
    visual_projection: candle_nn::Linear,
    text_projection: candle_nn::Linear,
    tokenizer: Tokenizer,
    pad_id: u32,
    dtype: DType,
    device: Device,
}

fn load_err(message: String) -> GazeError {
    GazeError::BackendLoad {
        message,
        remedy: "the directory must contain model.safetensors and tokenizer.json of a \
                 CLIP ViT-B/32 checkpoint"
            .into(),
    }
}

impl PretrainedBackend {
    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let weights = dir.join("model.safetensors");
        let tok = dir.join("tokenizer.json");
        for p in [&weights, &tok] {
            if !p.is_file() {
                return Err(load_err(format!("missing {}", p.display())));
            }
        }
        let tokenizer = Tokenizer::from_file(&tok).map_err(|e| load_err(e.to_string()))?;
        let pad_id = *tokenizer
            .get_vocab(true)
            .get("<|endoftext|>")
            .ok_or_else(|| load_err("tokenizer has no <|endoftext|> token".into()))?;
        // SAFETY: the file is memory-mapped read-only and not modified while loaded.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[&weights], dtype, device)? };
        let config = ClipConfig::vit_base_patch32();
        let vision = ClipVisionTransformer::new(vb.pp("vision_model"), &config.vision_config)?;
        let text = ClipTextTransformer::new(vb.pp("text_model"), &config.text_config)?;
        let visual_projection = candle_nn::linear_no_bias(
            config.vision_config.embed_dim,
            config.vision_config.projection_dim,
            vb.pp("visual_projection"),
        )?;
        let text_projection = candle_nn::linear_no_bias(
            config.text_config.embed_dim,
            config.text_config.projection_dim,
            vb.pp("text_projection"),
        )?;
        Ok(Self {
            config,
            vision,
            text,
            visual_projection,
            text_projection,
            tokenizer,
            pad_id,
            dtype,
            device: device.clone(),
        })
    }

    fn preprocess(&self, images: &Tensor) -> Result<Tensor> {
        check_image_batch(images, self.config.image_size)?;
        let mean = Tensor::new(&MEAN, &self.device)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&STD, &self.device)?.reshape((1, 3, 1, 1))?;
        Ok(images
            .to_dtype(DType::F64)?
            .broadcast_sub(&mean)?
            .broadcast_div(&std)?
            .to_dtype(self.dtype)?)
    }
}

impl VisionLanguageBackend for PretrainedBackend {
    fn name(&self) -> &str {
        "clip-vit-b32"
    }

    fn embed_dim(&self) -> usize {
        self.config.vision_config.projection_dim
    }

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn spatial_grid_shape(&self) -> (usize, usize) {
        let side = self.config.image_size / self.config.vision_config.patch_size;
        (side, side)
    }

    fn spatial_channels(&self) -> usize {
        self.config.vision_config.embed_dim
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_spatial: true,
            trainable_image_encoder: false,
            global_is_mean_pooled_spatial: false,
        }
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn encode_text(&self, prompt: &str) -> Result<Tensor> {
        if prompt.is_empty() {
            return Err(GazeError::invalid("prompt must be non-empty"));
        }
        let enc = self
            .tokenizer
            .encode(prompt, true)
            .map_err(|e| GazeError::invalid(format!("tokenizer: {e}")))?;
        let mut ids = enc.get_ids().to_vec();
        let max = self.config.text_config.max_position_embeddings;
        ids.truncate(max);
        ids.resize(max, self.pad_id);
        let ids = Tensor::new(ids.as_slice(), &self.device)?.unsqueeze(0)?;
        let feat = self.text.forward(&ids)?.apply(&self.text_projection)?;
        Ok(ops::l2_normalize_rows(&feat)?.squeeze(0)?.detach())
    }

    fn encode_image_spatial(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.preprocess(images)?;
        let states = self.vision.output_hidden_states(&x)?;
        // the last entry is the pooled output; the one before it is the final
        // encoder layer, whose rows 1.. are the patch tokens
        let last = states
            .get(states.len().saturating_sub(2))
            .ok_or_else(|| load_err("vision encoder returned no hidden states".into()))?;
        let n = last.dim(1)?;
        Ok(last.i((.., 1..n, ..))?.contiguous()?.detach())
    }

    fn encode_image_global(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.preprocess(images)?;
        let feat = self.vision.forward(&x)?.apply(&self.visual_projection)?;
        Ok(ops::l2_normalize_rows(&feat)?.detach())
    }

    fn image_encoder_params(&self) -> Option<&ParamStore> {
        None
    }

    fn text_encoder_params(&self) -> Option<&ParamStore> {
        None
    }
}
