//! DISTS structure/texture distance on a VGG-16 trunk with L2 pooling.
//!
//! Expects one safetensors file holding the VGG-16 `features.{i}` weights
//! and the learned `alpha`/`beta` vectors (`(1, 1475, 1, 1)` each).

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};

use crate::backends::require_file;
use crate::error::{Error, Result};

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
const CHANNELS: [usize; 6] = [3, 64, 128, 256, 512, 512];
const C1: f64 = 1e-6;
const C2: f64 = 1e-6;

/// Convolution indices per stage; every stage after the first starts with L2 pooling.
const STAGES: [&[(usize, usize, usize)]; 5] = [
    &[(0, 3, 64), (2, 64, 64)],
    &[(5, 64, 128), (7, 128, 128)],
    &[(10, 128, 256), (12, 256, 256), (14, 256, 256)],
    &[(17, 256, 512), (19, 512, 512), (21, 512, 512)],
    &[(24, 512, 512), (26, 512, 512), (28, 512, 512)],
];

pub struct Dists {
    stages: Vec<Vec<Conv2d>>,
    alpha: Tensor,
    beta: Tensor,
}

impl Dists {
    pub const FILE_NAME: &'static str = "dists_vgg16.safetensors";

    pub fn load(path: &Path) -> Result<Self> {
        require_file(path)?;
        // SAFETY: the weights file is treated as immutable for the lifetime of the process.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[path], DType::F32, &Device::Cpu)? };
        Self::new(vb)
    }

    pub fn new(vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let fv = vb.pp("features");
        let stages = STAGES
            .iter()
            .map(|convs| {
                convs
                    .iter()
                    .map(|&(i, cin, cout)| Ok(candle_nn::conv2d(cin, cout, 3, cfg, fv.pp(i.to_string()))?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let total: usize = CHANNELS.iter().sum();
        let alpha = vb.get((1, total, 1, 1), "alpha")?;
        let beta = vb.get((1, total, 1, 1), "beta")?;
        Ok(Self { stages, alpha, beta })
    }

    fn l2pool(x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let a = [0.5f32, 1.0, 0.5];
        let mut g = Vec::with_capacity(9);
        for i in a {
            for j in a {
                g.push(i * j / 4.0);
            }
        }
        let k = Tensor::from_vec(g, (1, 1, 3, 3), x.device())?.to_dtype(x.dtype())?;
        let y = x.sqr()?.reshape((b * c, 1, h, w))?.conv2d(&k, 1, 2, 1, 1)?;
        let (_, _, oh, ow) = y.dims4()?;
        Ok((y + 1e-12)?.sqrt()?.reshape((b, c, oh, ow))?)
    }

    /// Raw input followed by the five stage outputs.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mean = Tensor::new(&IMAGENET_MEAN, x.device())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, x.device())?.reshape((1, 3, 1, 1))?;
        let mut h = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut out = vec![x.clone()];
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                h = Self::l2pool(&h)?;
            }
            for conv in convs {
                h = conv.forward(&h)?.relu()?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Distance between two `(1, 3, H, W)` images in `[0, 1]`.
    pub fn distance(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        if x.dims() != y.dims() {
            return Err(Error::shape("DISTS inputs differ in shape"));
        }
        let fx = self.features(&x.to_dtype(DType::F32)?)?;
        let fy = self.features(&y.to_dtype(DType::F32)?)?;
        let w_sum = (self.alpha.sum_all()? + self.beta.sum_all()?)?;
        let alpha = self.alpha.broadcast_div(&w_sum)?;
        let beta = self.beta.broadcast_div(&w_sum)?;
        let mut d1 = 0.0f64;
        let mut d2 = 0.0f64;
        let mut offset = 0;
        for (k, (a, b)) in fx.iter().zip(&fy).enumerate() {
            let c = CHANNELS[k];
            let mean = |t: &Tensor| -> Result<Tensor> { Ok(t.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?) };
            let (ma, mb) = (mean(a)?, mean(b)?);
            let s1 = ((ma.broadcast_mul(&mb)? * 2.0)? + C1)?.div(&((ma.sqr()? + mb.sqr()?)? + C1)?)?;
            let va = mean(&a.broadcast_sub(&ma)?.sqr()?)?;
            let vb = mean(&b.broadcast_sub(&mb)?.sqr()?)?;
            let cov = (mean(&(a * b)?)? - ma.broadcast_mul(&mb)?)?;
            let s2 = ((cov * 2.0)? + C2)?.div(&((va + vb)? + C2)?)?;
            let ak = alpha.narrow(1, offset, c)?;
            let bk = beta.narrow(1, offset, c)?;
            d1 += ak.broadcast_mul(&s1)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            d2 += bk.broadcast_mul(&s2)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            offset += c;
        }
        Ok(1.0 - (d1 + d2))
    }
}

#[cfg(test)]
mod tests {
    use candle_nn::{Init, VarMap};

    use super::*;

    #[test]
    fn random_weights_identity_is_zero() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        // Positive weights, as learned DISTS weights are.
        let total: usize = CHANNELS.iter().sum();
        varmap.get((1, total, 1, 1), "alpha", Init::Const(0.1), DType::F32, &Device::Cpu).unwrap();
        varmap.get((1, total, 1, 1), "beta", Init::Const(0.1), DType::F32, &Device::Cpu).unwrap();
        let d = Dists::new(vb).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let y = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        assert!(d.distance(&x, &x).unwrap().abs() < 1e-5);
        assert!(d.distance(&x, &y).unwrap() > 1e-3);
    }
}
