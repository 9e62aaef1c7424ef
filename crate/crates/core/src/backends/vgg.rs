//! VGG-19 feature extractor using torchvision's `features.{index}` parameter
//! naming. A `convX_Y` feature is the ReLU activation following that
//! convolution, at the input's native resolution.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};

use super::{require_file, BackendDescriptor, PerceptualExtractor, PerceptualFeatures};
use crate::error::Result;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// `(name, torchvision index, in, out)` for every convolution; a 2×2 max
/// pool follows the last convolution of each block.
pub const VGG19_LAYERS: [(&str, usize, usize, usize); 16] = [
    ("conv1_1", 0, 3, 64),
    ("conv1_2", 2, 64, 64),
    ("conv2_1", 5, 64, 128),
    ("conv2_2", 7, 128, 128),
    ("conv3_1", 10, 128, 256),
    ("conv3_2", 12, 256, 256),
    ("conv3_3", 14, 256, 256),
    ("conv3_4", 16, 256, 256),
    ("conv4_1", 19, 256, 512),
    ("conv4_2", 21, 512, 512),
    ("conv4_3", 23, 512, 512),
    ("conv4_4", 25, 512, 512),
    ("conv5_1", 28, 512, 512),
    ("conv5_2", 30, 512, 512),
    ("conv5_3", 32, 512, 512),
    ("conv5_4", 34, 512, 512),
];

pub struct Vgg19 {
    convs: Vec<(&'static str, Conv2d)>,
}

impl Vgg19 {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let vb = vb.pp("features");
        let convs = VGG19_LAYERS
            .iter()
            .map(|&(name, idx, cin, cout)| Ok((name, candle_nn::conv2d(cin, cout, 3, cfg, vb.pp(idx.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    /// Runs up to the deepest requested layer; `x` is already normalised.
    pub fn forward_layers(&self, x: &Tensor, layers: &[String]) -> Result<Vec<(String, Tensor)>> {
        let deepest = self
            .convs
            .iter()
            .rposition(|(n, _)| layers.iter().any(|l| l == n))
            .unwrap_or(0);
        let mut out = Vec::new();
        let mut h = x.clone();
        for (i, (name, conv)) in self.convs.iter().enumerate().take(deepest + 1) {
            h = conv.forward(&h)?.relu()?;
            if layers.iter().any(|l| l == name) {
                out.push((name.to_string(), h.clone()));
            }
            let block_ends = self.convs.get(i + 1).map_or(true, |(next, _)| next[..5] != name[..5]);
            if block_ends && i < deepest {
                h = h.max_pool2d(2)?;
            }
        }
        Ok(out)
    }
}

pub struct Vgg19Backend {
    net: Vgg19,
    descriptor: BackendDescriptor,
    device: Device,
}

impl Vgg19Backend {
    pub fn load(path: &Path) -> Result<Self> {
        require_file(path)?;
        let device = Device::Cpu;
        // SAFETY: the weights file is treated as immutable for the lifetime of the process.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[path], DType::F32, &device)? };
        Self::from_var_builder(vb)
    }

    pub fn from_var_builder(vb: VarBuilder) -> Result<Self> {
        let device = vb.device().clone();
        Ok(Self {
            net: Vgg19::new(vb)?,
            descriptor: BackendDescriptor {
                name: "vgg19".into(),
                embed_dim: 512,
                // Nominal training size; features are computed at native resolution.
                image_input_size: 224,
                differentiable: true,
            },
            device,
        })
    }
}

impl PerceptualExtractor for Vgg19Backend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn layer_names(&self) -> Vec<String> {
        VGG19_LAYERS.iter().map(|l| l.0.to_string()).collect()
    }

    fn default_content_layers(&self) -> Vec<String> {
        vec!["conv4_2".into(), "conv5_2".into()]
    }

    fn features(&self, images: &Tensor, layers: &[String]) -> Result<PerceptualFeatures> {
        self.check_layers(layers)?;
        let dtype = images.dtype();
        let x = images.to_dtype(DType::F32)?.to_device(&self.device)?;
        let mean = Tensor::new(&IMAGENET_MEAN, &self.device)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, &self.device)?.reshape((1, 3, 1, 1))?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let layers = self
            .net
            .forward_layers(&x, layers)?
            .into_iter()
            .map(|(n, t)| Ok((n, t.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Ok(PerceptualFeatures { layers })
    }
}
