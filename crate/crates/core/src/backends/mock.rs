//! Deterministic stand-ins for the pretrained backends.
//!
//! Image embeddings are the affine map [`MOCK_IMAGE_MATRIX`] applied to
//! `(mean R, mean G, mean B, 1)`, so they depend on nothing but the mean
//! colour. The last output coordinate is never produced by the image map: a
//! text vector pointing along it is orthogonal to every image.
//!
//! Text embeddings are the sum of per-token vectors. A token's vector is
//! drawn from a splitmix64 stream seeded with the FNV-1a hash of its UTF-8
//! bytes, each entry mapped to `[-1, 1)`. Explicit vectors registered with
//! [`MockJointEmbedder::with_text`] take precedence over hashing.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};

use super::{BackendDescriptor, Embedding, JointEmbedder, PerceptualExtractor, PerceptualFeatures};
use crate::error::{Error, Result};

pub const MOCK_EMBED_DIM: usize = 8;

/// Rows are output coordinates; columns multiply `(r, g, b, 1)`.
pub const MOCK_IMAGE_MATRIX: [[f64; 4]; MOCK_EMBED_DIM] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.5, -0.5, 0.0, 0.0],
    [0.0, 0.5, -0.5, 0.0],
    [-0.5, 0.0, 0.5, 0.0],
    [0.0, 0.0, 0.0, 0.1],
    [0.0, 0.0, 0.0, 0.0],
];

#[derive(Debug, Clone)]
pub struct MockJointEmbedder {
    descriptor: BackendDescriptor,
    text_vectors: BTreeMap<String, Vec<f64>>,
}

impl Default for MockJointEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl MockJointEmbedder {
    pub fn new() -> Self {
        Self {
            descriptor: BackendDescriptor {
                name: "mock".into(),
                embed_dim: MOCK_EMBED_DIM,
                // The mean colour is what an area resize to 1×1 keeps.
                image_input_size: 1,
                differentiable: true,
            },
            text_vectors: BTreeMap::new(),
        }
    }

    /// Pins the embedding of `text` (after lowercasing and whitespace folding).
    pub fn with_text(mut self, text: &str, vector: Vec<f64>) -> Result<Self> {
        if vector.len() != MOCK_EMBED_DIM {
            return Err(Error::config(format!(
                "mock text vector for '{text}' must have {MOCK_EMBED_DIM} entries, got {}",
                vector.len()
            )));
        }
        Embedding::new(vector.clone())?;
        self.text_vectors.insert(normalize(text), vector);
        Ok(self)
    }

    /// Embedding of a pure colour, i.e. of any image with that mean colour.
    pub fn color_embedding(rgb: [f64; 3]) -> Vec<f64> {
        MOCK_IMAGE_MATRIX
            .iter()
            .map(|row| row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2] + row[3])
            .collect()
    }

    pub fn token_vector(token: &str) -> [f64; MOCK_EMBED_DIM] {
        let mut state = fnv1a64(token.as_bytes());
        let mut out = [0.0; MOCK_EMBED_DIM];
        for v in out.iter_mut() {
            let bits = splitmix64(&mut state) >> 11;
            *v = bits as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        }
        out
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl JointEmbedder for MockJointEmbedder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let means = images.flatten_from(2)?.mean(D::Minus1)?;
        let ones = Tensor::ones((b, 1), images.dtype(), images.device())?;
        let aug = Tensor::cat(&[&means, &ones], 1)?;
        let flat: Vec<f64> = MOCK_IMAGE_MATRIX.iter().flatten().copied().collect();
        let matrix = Tensor::from_vec(flat, (MOCK_EMBED_DIM, 4), images.device())?.to_dtype(images.dtype())?;
        Ok(aug.matmul(&matrix.t()?)?)
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        let key = normalize(text);
        if let Some(v) = self.text_vectors.get(&key) {
            return Embedding::new(v.clone());
        }
        let mut acc = [0.0; MOCK_EMBED_DIM];
        for token in key.split(' ') {
            for (a, t) in acc.iter_mut().zip(Self::token_vector(token)) {
                *a += t;
            }
        }
        Embedding::new(acc.to_vec())
    }
}

/// Perceptual mock exposing a single `identity` layer that returns its input.
#[derive(Debug, Clone)]
pub struct MockPerceptual {
    descriptor: BackendDescriptor,
}

impl Default for MockPerceptual {
    fn default() -> Self {
        Self::new()
    }
}

impl MockPerceptual {
    pub const LAYER: &'static str = "identity";

    pub fn new() -> Self {
        Self {
            descriptor: BackendDescriptor {
                name: "mock".into(),
                embed_dim: 3,
                image_input_size: 1,
                differentiable: true,
            },
        }
    }
}

impl PerceptualExtractor for MockPerceptual {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn layer_names(&self) -> Vec<String> {
        vec![Self::LAYER.to_string()]
    }

    fn features(&self, images: &Tensor, layers: &[String]) -> Result<PerceptualFeatures> {
        self.check_layers(layers)?;
        let layers = layers.iter().map(|l| (l.clone(), images.clone())).collect();
        Ok(PerceptualFeatures { layers })
    }
}
