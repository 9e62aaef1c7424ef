//! Adapter for a ViT-B/32 CLIP checkpoint in the Hugging Face layout
//! (`model.safetensors` + `tokenizer.json`).

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::{ClipConfig, ClipModel};
use tokenizers::Tokenizer;

use super::{require_file, resize_bilinear, BackendDescriptor, Embedding, JointEmbedder};
use crate::error::{Error, Result};

const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

pub struct ClipBackend {
    model: ClipModel,
    tokenizer: Option<Tokenizer>,
    descriptor: BackendDescriptor,
    template: Option<String>,
    device: Device,
}

impl ClipBackend {
    /// Loads `model.safetensors` and `tokenizer.json` from `dir`.
    ///
    /// `template` wraps every text before tokenisation; `{}` marks where the
    /// text goes (e.g. `"a photo of {}"`).
    pub fn load(dir: &Path, template: Option<String>) -> Result<Self> {
        let weights = dir.join("model.safetensors");
        let tokenizer_path = dir.join("tokenizer.json");
        require_file(&weights)?;
        require_file(&tokenizer_path)?;
        let device = Device::Cpu;
        // SAFETY: the weights file is treated as immutable for the lifetime of the process.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[weights], DType::F32, &device)? };
        let tokenizer = Tokenizer::from_file(&tokenizer_path)
            .map_err(|e| Error::Backend(format!("cannot load tokenizer: {e}")))?;
        Self::from_parts(vb, &ClipConfig::vit_base_patch32(), Some(tokenizer), template)
    }

    /// Builds the backend from an arbitrary variable source and configuration.
    pub fn from_parts(
        vb: VarBuilder,
        config: &ClipConfig,
        tokenizer: Option<Tokenizer>,
        template: Option<String>,
    ) -> Result<Self> {
        let device = vb.device().clone();
        let model = ClipModel::new(vb, config)?;
        Ok(Self {
            model,
            tokenizer,
            descriptor: BackendDescriptor {
                name: "clip-vit-b32".into(),
                embed_dim: config.vision_config.projection_dim,
                image_input_size: config.image_size,
                differentiable: true,
            },
            template,
            device,
        })
    }

    fn preprocess(&self, images: &Tensor) -> Result<Tensor> {
        let size = self.descriptor.image_input_size;
        let x = images.to_dtype(DType::F32)?.to_device(&self.device)?;
        let x = resize_bilinear(&x, size, size)?;
        let mean = Tensor::new(&CLIP_MEAN.map(|v| v as f32), &self.device)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&CLIP_STD.map(|v| v as f32), &self.device)?.reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}

impl JointEmbedder for ClipBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        let dtype = images.dtype();
        let pixels = self.preprocess(images)?;
        Ok(self.model.get_image_features(&pixels)?.to_dtype(dtype)?)
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        let tokenizer = self
            .tokenizer
            .as_ref()
            .ok_or_else(|| Error::Backend("CLIP backend was built without a tokenizer".into()))?;
        let text = match &self.template {
            Some(t) => t.replace("{}", text),
            None => text.to_string(),
        };
        let encoding = tokenizer
            .encode(text, true)
            .map_err(|e| Error::Backend(format!("tokenisation failed: {e}")))?;
        let ids = Tensor::new(encoding.get_ids(), &self.device)?.unsqueeze(0)?;
        Embedding::from_tensor(&self.model.get_text_features(&ids)?)
    }
}
