//! Contracts for the joint image–text embedder and the perceptual feature
//! extractor, plus the concrete backends behind them.
//!
//! Every backend consumes `(B, 3, H, W)` tensors with values in `[0, 1]` and
//! owns its own preprocessing (resizing, channel normalisation). Embeddings
//! are only ever compared through cosine similarity.

mod clip;
mod mock;
mod resize;
mod vgg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

pub use clip::ClipBackend;
pub use mock::{MockJointEmbedder, MockPerceptual, MOCK_EMBED_DIM, MOCK_IMAGE_MATRIX};
pub use resize::resize_bilinear;
pub use vgg::{Vgg19, Vgg19Backend, VGG19_LAYERS};

use crate::error::{Error, Result};
use crate::image::Image;

/// Floor applied to every cosine denominator in differentiable code paths.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::RejectedInput("embedding must have at least one entry".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::RejectedInput("embedding contains non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `(D,)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, self.values.len(), device)?.to_dtype(dtype)?)
    }

    /// Reads a `(D,)` or `(1, D)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Self::new(values)
    }

    pub(crate) fn rows_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        rows.into_iter().map(Self::new).collect()
    }
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero-norm embedding".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise cosine between `(B, D)` tensors; `b` may be `(1, D)` or `(D,)`.
/// Differentiable; the denominator is floored at [`COSINE_EPS`].
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let b = if b.rank() == 1 { b.unsqueeze(0)? } else { b.clone() };
    let b = b.broadcast_as(a.shape())?;
    let dot = (a * &b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?;
    let nb = b.sqr()?.sum(D::Minus1)?;
    let denom = ((na * nb)? + COSINE_EPS * COSINE_EPS)?.sqrt()?;
    Ok((dot / denom)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub embed_dim: usize,
    /// Square side the backend resizes to before encoding.
    pub image_input_size: usize,
    pub differentiable: bool,
}

pub trait JointEmbedder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// `(B, 3, H, W)` in `[0, 1]` to `(B, D)`, in the input's dtype when the
    /// backend can honour it. Gradients flow when the backend is differentiable.
    fn embed_images(&self, images: &Tensor) -> Result<Tensor>;

    /// Encodes an already validated, non-empty string.
    fn encode_text(&self, text: &str) -> Result<Embedding>;

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::RejectedInput("text must be non-empty".into()));
        }
        self.encode_text(text)
    }

    fn embed_image(&self, img: &Image) -> Result<Embedding> {
        img.ensure_finite()?;
        let t = img.to_tensor(DType::F32, &Device::Cpu)?;
        Embedding::from_tensor(&self.embed_images(&t)?)
    }

    /// Embeds equally sized images in one batch.
    fn embed_image_batch(&self, imgs: &[Image]) -> Result<Vec<Embedding>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        for img in imgs {
            img.ensure_finite()?;
        }
        let tensors = imgs
            .iter()
            .map(|i| i.to_tensor(DType::F32, &Device::Cpu))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor::cat(&tensors, 0)?;
        Embedding::rows_from_tensor(&self.embed_images(&batch)?)
    }
}

#[derive(Debug, Clone)]
pub struct PerceptualFeatures {
    pub layers: BTreeMap<String, Tensor>,
}

pub trait PerceptualExtractor: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn layer_names(&self) -> Vec<String>;

    /// Layers used by the content loss when none are configured.
    fn default_content_layers(&self) -> Vec<String> {
        self.layer_names()
    }

    /// Features for `(B, 3, H, W)` inputs; the map holds exactly `layers`.
    fn features(&self, images: &Tensor, layers: &[String]) -> Result<PerceptualFeatures>;

    fn perceptual_features(&self, img: &Image, layers: &[String]) -> Result<PerceptualFeatures> {
        img.ensure_finite()?;
        self.features(&img.to_tensor(DType::F32, &Device::Cpu)?, layers)
    }

    fn check_layers(&self, layers: &[String]) -> Result<()> {
        let known = self.layer_names();
        for l in layers {
            if !known.iter().any(|k| k == l) {
                return Err(Error::config(format!(
                    "unknown perceptual layer '{l}' for backend '{}'",
                    self.descriptor().name
                )));
            }
        }
        Ok(())
    }
}

pub type SharedJoint = Arc<dyn JointEmbedder>;
pub type SharedPerceptual = Arc<dyn PerceptualExtractor>;

/// Where pretrained weights are looked up when no directory is configured:
/// `$OBJSTYLE_CACHE`, then `$XDG_CACHE_HOME/objstyle`, then `~/.cache/objstyle`.
pub fn default_weights_dir() -> PathBuf {
    if let Some(p) = std::env::var_os("OBJSTYLE_CACHE") {
        return PathBuf::from(p);
    }
    if let Some(p) = std::env::var_os("XDG_CACHE_HOME") {
        return PathBuf::from(p).join("objstyle");
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("objstyle")
}

#[derive(Debug, Clone, Default)]
pub struct BackendOptions {
    pub weights_dir: Option<PathBuf>,
    pub text_template: Option<String>,
    /// Text vectors for the mock embedder, keyed by normalised phrase.
    pub mock_text_vectors: BTreeMap<String, Vec<f64>>,
}

impl BackendOptions {
    fn weights_dir(&self) -> PathBuf {
        self.weights_dir.clone().unwrap_or_else(default_weights_dir)
    }
}

/// Resolves a joint-embedder name: `mock` or `clip-vit-b32`.
pub fn load_joint(name: &str, opts: &BackendOptions) -> Result<SharedJoint> {
    match name {
        "mock" => {
            let mut m = MockJointEmbedder::new();
            for (k, v) in &opts.mock_text_vectors {
                m = m.with_text(k, v.clone())?;
            }
            Ok(Arc::new(m))
        }
        "clip-vit-b32" => {
            let dir = opts.weights_dir().join("clip-vit-base-patch32");
            Ok(Arc::new(ClipBackend::load(&dir, opts.text_template.clone())?))
        }
        other => Err(Error::config(format!("unknown image-text backend '{other}'"))),
    }
}

/// Resolves a perceptual backend name: `mock` or `vgg19`.
pub fn load_perceptual(name: &str, opts: &BackendOptions) -> Result<SharedPerceptual> {
    match name {
        "mock" => Ok(Arc::new(MockPerceptual::new())),
        "vgg19" => {
            let path = opts.weights_dir().join("vgg19.safetensors");
            Ok(Arc::new(Vgg19Backend::load(&path)?))
        }
        other => Err(Error::config(format!("unknown perceptual backend '{other}'"))),
    }
}

pub(crate) fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Backend(format!("weights not found at {}", path.display())))
    }
}
