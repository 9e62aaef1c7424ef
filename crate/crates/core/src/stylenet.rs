//! The per-scene stylisation network: a three-level U-Net.
//!
//! Every stage is `conv3×3 → instance norm → leaky ReLU`. Down stages keep
//! their activation as a skip and then halve the resolution with 2×2 average
//! pooling; up stages double it with nearest-neighbour upsampling and
//! concatenate the matching skip before their convolution. A final 3×3
//! convolution produces a per-pixel logit offset that is added to the
//! input's logit and squashed by a sigmoid, so outputs always lie in `[0, 1]`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const CHECKPOINT_FORMAT: &str = "objstyle-stylenet";
const CHECKPOINT_VERSION: &str = "1";
const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const LOGIT_CLAMP: f64 = 1e-3;
/// Scale of the head's initial weights relative to the usual fan-in bound.
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleNetConfig {
    pub down_channels: Vec<usize>,
    pub up_channels: Vec<usize>,
    pub input_resolution: usize,
}

impl Default for StyleNetConfig {
    fn default() -> Self {
        Self {
            down_channels: vec![16, 32, 64],
            up_channels: vec![64, 32, 16],
            input_resolution: 512,
        }
    }
}

impl StyleNetConfig {
    pub fn with_resolution(input_resolution: usize) -> Self {
        Self {
            input_resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_channels.len() != 3 || self.up_channels.len() != 3 {
            return Err(Error::config("the U-Net has exactly three down and three up stages"));
        }
        if self.down_channels.iter().chain(&self.up_channels).any(|&c| c == 0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.input_resolution == 0 || self.input_resolution % 8 != 0 {
            return Err(Error::config("input resolution must be a positive multiple of 8"));
        }
        Ok(())
    }

    /// `(name, in_channels, out_channels)` for every convolution, in forward order.
    fn convs(&self) -> Vec<(String, usize, usize)> {
        let d = &self.down_channels;
        let u = &self.up_channels;
        vec![
            ("down1".into(), 3, d[0]),
            ("down2".into(), d[0], d[1]),
            ("down3".into(), d[1], d[2]),
            ("up1".into(), d[2] + d[2], u[0]),
            ("up2".into(), u[0] + d[1], u[1]),
            ("up3".into(), u[1] + d[0], u[2]),
            ("head".into(), u[2], 3),
        ]
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, cin, cout) in self.convs() {
            out.push((format!("{name}.conv.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("{name}.conv.bias"), vec![cout]));
            if name != "head" {
                out.push((format!("{name}.norm.weight"), vec![cout]));
                out.push((format!("{name}.norm.bias"), vec![cout]));
            }
        }
        out
    }
}

pub struct StyleNetState {
    config: StyleNetConfig,
    params: BTreeMap<String, Var>,
    pub step: usize,
}

impl std::fmt::Debug for StyleNetState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StyleNetState")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .field("step", &self.step)
            .finish()
    }
}

impl StyleNetState {
    /// Deterministic initialisation: uniform `±1/sqrt(fan_in)` for convolutions
    /// (scaled down for the head), unit gain and zero shift for normalisation.
    pub fn init(config: StyleNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let values: Vec<f32> = if name.ends_with("norm.weight") {
                vec![1.0; n]
            } else if name.ends_with("norm.bias") {
                vec![0.0; n]
            } else {
                let conv = name.split('.').next().unwrap_or_default();
                let cin = config
                    .convs()
                    .into_iter()
                    .find(|c| c.0 == conv)
                    .map(|c| c.1)
                    .unwrap_or(1);
                let mut bound = 1.0 / ((cin * 9) as f64).sqrt();
                if conv == "head" {
                    bound *= HEAD_INIT_SCALE;
                }
                (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
            };
            let t = Tensor::from_vec(values, shape.as_slice(), &Device::Cpu)?;
            params.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self { config, params, step: 0 })
    }

    pub fn config(&self) -> &StyleNetConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    fn stage(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.param(&format!("{name}.conv.weight"))?;
        let b = self.param(&format!("{name}.conv.bias"))?;
        let h = x.conv2d(w, 1, 1, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
        let mean = h.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let centered = h.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let gamma = self.param(&format!("{name}.norm.weight"))?.reshape((1, (), 1, 1))?;
        let beta = self.param(&format!("{name}.norm.bias"))?.reshape((1, (), 1, 1))?;
        let h = normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?;
        Ok(h.maximum(&(&h * LEAKY_SLOPE)?)?)
    }

    /// `(B, 3, H, W)` in, same shape out; `H` and `W` must be multiples of 8.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image dimensions {h}x{w} must be non-zero multiples of 8"
            )));
        }
        let x = x.to_dtype(DType::F32)?;
        let s1 = self.stage("down1", &x)?;
        let s2 = self.stage("down2", &s1.avg_pool2d(2)?)?;
        let s3 = self.stage("down3", &s2.avg_pool2d(2)?)?;
        let bottom = s3.avg_pool2d(2)?;

        let u = bottom.upsample_nearest2d(h / 4, w / 4)?;
        let u = self.stage("up1", &Tensor::cat(&[&u, &s3], 1)?)?;
        let u = u.upsample_nearest2d(h / 2, w / 2)?;
        let u = self.stage("up2", &Tensor::cat(&[&u, &s2], 1)?)?;
        let u = u.upsample_nearest2d(h, w)?;
        let u = self.stage("up3", &Tensor::cat(&[&u, &s1], 1)?)?;

        let hw = self.param("head.conv.weight")?;
        let hb = self.param("head.conv.bias")?;
        let offset = u.conv2d(hw, 1, 1, 1, 1)?.broadcast_add(&hb.reshape((1, (), 1, 1))?)?;
        let clamped = x.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)?;
        let logit = (clamped.log()? - (clamped.affine(-1.0, 1.0)?).log()?)?;
        Ok(sigmoid(&(logit + offset)?)?)
    }

    pub fn forward(&self, img: &Image) -> Result<Image> {
        img.ensure_finite()?;
        let start = Instant::now();
        let out = self.forward_tensor(&img.to_tensor(DType::F32, &Device::Cpu)?)?;
        let out = Image::from_tensor(&out)?;
        log::debug!("stylenet forward {}x{} in {:?}", img.height(), img.width(), start.elapsed());
        Ok(out)
    }

    /// Single-file archive: named parameter tensors plus the config echo,
    /// step counter and a format tag in the metadata header.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck_err = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut buffers = Vec::new();
        for (name, var) in &self.params {
            let values = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((name.clone(), var.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(StDtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| ck_err(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("step".to_string(), self.step.to_string());
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| ck_err(e.to_string()))?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck_err = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| ck_err(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(e.to_string()))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| ck_err("missing metadata header".into()))?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(ck_err("not a stylenet checkpoint".into()));
        }
        if meta.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION) {
            return Err(ck_err(format!("unsupported version {:?}", meta.get("version"))));
        }
        let config: StyleNetConfig = serde_json::from_str(
            meta.get("config").ok_or_else(|| ck_err("missing config".into()))?,
        )
        .map_err(|e| ck_err(e.to_string()))?;
        config.validate().map_err(|e| ck_err(e.to_string()))?;
        let step = meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ck_err("missing step".into()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| ck_err(e.to_string()))?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let view = st.tensor(&name).map_err(|e| ck_err(format!("{name}: {e}")))?;
            if view.dtype() != StDtype::F32 || view.shape() != shape.as_slice() {
                return Err(ck_err(format!("{name}: unexpected dtype or shape")));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, shape.as_slice(), &Device::Cpu)?;
            params.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self { config, params, step })
    }
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}
