//! Training objectives on `(1, 3, H, W)` image tensors, plus plain-value
//! wrappers that take [`Image`]s and return numbers.
//!
//! * directional: mean over augmented patch views of `1 − cos(ΔP, ΔT)`
//! * consistency: Jensen–Shannon divergence (nats) between the normalised
//!   patch-to-image cosine profiles of source and output
//! * background preservation: `1 − MS-SSIM` plus mean absolute error on the
//!   masked background
//! * content: summed feature MSE
//! * total variation: `mean(dx²) + mean(dy²)`

pub mod augment;
pub mod msssim;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{cosine_rows, JointEmbedder, PerceptualExtractor};
use crate::error::{Error, Result};
use crate::grounding::Patch;
use crate::image::{BinaryMask, Image, Rect};
use crate::text::TextTriple;
pub use augment::{random_views, Perspective, View, ViewSampler};

/// Floor added to similarity profiles before they are normalised.
pub const PROB_EPS: f64 = 1e-8;
pub const DEFAULT_DISTORTION: f64 = 0.5;
pub const DEFAULT_N_AUG: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dir: f64,
    pub lambda_con: f64,
    pub lambda_abp: f64,
    pub lambda_c: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dir: 1.5e4,
            lambda_con: 3e4,
            lambda_abp: 3e4,
            lambda_c: 4e2,
            lambda_tv: 2e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_dir, self.lambda_con, self.lambda_abp, self.lambda_c, self.lambda_tv];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Unweighted component values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub dir: f64,
    pub con: f64,
    pub abp: f64,
    pub content: f64,
    pub tv: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("dir", self.dir),
            ("con", self.con),
            ("abp", self.abp),
            ("content", self.content),
            ("tv", self.tv),
        ]
    }
}

/// Weighted sum and the per-term dictionary (weighted values plus `total`).
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(f64, BTreeMap<String, f64>)> {
    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::TrainingDivergence {
                step: 0,
                term: name.to_string(),
                last_good_checkpoint: None,
            });
        }
    }
    let w = [weights.lambda_dir, weights.lambda_con, weights.lambda_abp, weights.lambda_c, weights.lambda_tv];
    let mut out = BTreeMap::new();
    let mut total = 0.0;
    for ((name, v), w) in terms.named().into_iter().zip(w) {
        out.insert(name.to_string(), w * v);
        total += w * v;
    }
    out.insert("total".to_string(), total);
    Ok((total, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::RejectedInput("probabilities must be finite and non-negative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::RejectedInput(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self { probs })
    }

    /// `relu(v) + ε`, normalised; an all-non-positive profile is degenerate.
    pub fn from_similarities(v: &[f64]) -> Result<Self> {
        let pos: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
        if pos.iter().sum::<f64>() <= 0.0 {
            return Err(Error::DegenerateSimilarity("no positive similarity in profile".into()));
        }
        let floored: Vec<f64> = pos.iter().map(|x| x + PROB_EPS).collect();
        let s: f64 = floored.iter().sum();
        Ok(Self {
            probs: floored.into_iter().map(|x| x / s).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Jensen–Shannon divergence in nats, with `0·ln 0 = 0`.
pub fn jsd(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::shape(format!("{} vs {} entries", p.probs.len(), q.probs.len())));
    }
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        let m = 0.5 * (a + b);
        total += 0.5 * kl(a, m) + 0.5 * kl(b, m);
    }
    Ok(total.max(0.0))
}

/// Tensor JSD between two strictly positive probability vectors.
pub fn jsd_t(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let m = ((p + q)? * 0.5)?;
    let kl_p = (p * (p.log()? - m.log()?)?)?.sum_all()?;
    let kl_q = (q * (q.log()? - m.log()?)?)?.sum_all()?;
    Ok(((kl_p + kl_q)? * 0.5)?)
}

/// `relu(v) + ε`, normalised to sum 1, as a differentiable tensor.
fn profile_t(v: &Tensor) -> Result<Tensor> {
    let pos = v.relu()?;
    let s = pos.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s <= 0.0 {
        return Err(Error::DegenerateSimilarity("no positive similarity in profile".into()));
    }
    let f = (pos + PROB_EPS)?;
    Ok(f.broadcast_div(&f.sum_all()?)?)
}

/// Embedding difference of the source and target texts.
pub fn text_direction(backend: &dyn JointEmbedder, texts: &TextTriple, dtype: DType) -> Result<Tensor> {
    let src = backend.embed_text(&texts.source)?;
    let tgt = backend.embed_text(&texts.target)?;
    let d: Vec<f64> = tgt.values().iter().zip(src.values()).map(|(a, b)| a - b).collect();
    if d.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateText);
    }
    Ok(Tensor::from_vec(d.clone(), (1, d.len()), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Directional loss over paired views: `views` is built once and gathers
/// from both images, so each src/out pair shares its warp.
pub fn directional_t(
    out_img: &Tensor,
    src_img: &Tensor,
    views: &ViewSampler,
    delta_t: &Tensor,
    backend: &dyn JointEmbedder,
) -> Result<Tensor> {
    if views.is_empty() {
        return Err(Error::DegenerateInput("no patch views".into()));
    }
    let e_out = backend.embed_images(&views.gather(out_img)?)?;
    let e_src = backend.embed_images(&views.gather(&src_img.detach())?)?.detach();
    let dp = (e_out - e_src)?;
    let cos = cosine_rows(&dp, delta_t)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// Consistency loss from plain crops at `rects` in both images.
pub fn consistency_t(
    out_img: &Tensor,
    src_img: &Tensor,
    crops: &ViewSampler,
    backend: &dyn JointEmbedder,
) -> Result<Tensor> {
    let src_img = src_img.detach();
    let d_src = cosine_rows(&backend.embed_images(&crops.gather(&src_img)?)?, &backend.embed_images(&src_img)?)?.detach();
    let d_out = cosine_rows(&backend.embed_images(&crops.gather(out_img)?)?, &backend.embed_images(out_img)?)?;
    jsd_t(&profile_t(&d_src)?, &profile_t(&d_out)?)
}

/// `(1 − MS-SSIM) + mean|·|` on the masked images; zero for an empty mask.
pub fn abp_t(out_img: &Tensor, src_img: &Tensor, bg: &BinaryMask) -> Result<Tensor> {
    if bg.is_all_zero() {
        return Ok(Tensor::zeros((), out_img.dtype(), out_img.device())?);
    }
    let m = bg.to_tensor(out_img.dtype(), out_img.device())?;
    let o = out_img.broadcast_mul(&m)?;
    let s = src_img.detach().broadcast_mul(&m)?;
    let l1 = (&o - &s)?.abs()?.mean_all()?;
    let ms = msssim::ms_ssim(&o, &s)?;
    Ok((ms.affine(-1.0, 1.0)? + l1)?)
}

/// Sum over `layers` of the feature MSE.
pub fn content_t(
    out_img: &Tensor,
    src_img: &Tensor,
    backend: &dyn PerceptualExtractor,
    layers: &[String],
) -> Result<Tensor> {
    let fo = backend.features(out_img, layers)?;
    let fs = backend.features(&src_img.detach(), layers)?;
    let mut acc = Tensor::zeros((), out_img.dtype(), out_img.device())?;
    for l in layers {
        let d = (&fo.layers[l] - fs.layers[l].detach())?.sqr()?.mean_all()?.to_dtype(out_img.dtype())?;
        acc = (acc + d)?;
    }
    Ok(acc)
}

pub fn tv_t(img: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape("total variation needs at least 2x2 pixels"));
    }
    let dx = (img.narrow(D::Minus1, 1, w - 1)? - img.narrow(D::Minus1, 0, w - 1)?)?;
    let dy = (img.narrow(D::Minus2, 1, h - 1)? - img.narrow(D::Minus2, 0, h - 1)?)?;
    Ok((dx.sqr()?.mean_all()? + dy.sqr()?.mean_all()?)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn image_t(img: &Image) -> Result<Tensor> {
    img.ensure_finite()?;
    img.to_tensor(DType::F64, &Device::Cpu)
}

/// Source and output patches at identical rects.
#[derive(Debug, Clone)]
pub struct PatchPairBatch {
    pub src_patches: Vec<Patch>,
    pub out_patches: Vec<Patch>,
    pub n_aug: usize,
}

impl PatchPairBatch {
    pub fn new(src_patches: Vec<Patch>, out_patches: Vec<Patch>, n_aug: usize) -> Result<Self> {
        if src_patches.is_empty() || src_patches.len() != out_patches.len() {
            return Err(Error::shape("patch lists must be non-empty and of equal length"));
        }
        if src_patches.iter().zip(&out_patches).any(|(a, b)| a.rect != b.rect) {
            return Err(Error::shape("paired patches must share their rects"));
        }
        if n_aug == 0 {
            return Err(Error::config("at least one augmented view per patch"));
        }
        Ok(Self {
            src_patches,
            out_patches,
            n_aug,
        })
    }

    pub fn len(&self) -> usize {
        self.src_patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_patches.is_empty()
    }

    /// Patches laid side by side as one image per member, so the tensor
    /// losses can gather them with rect offsets.
    fn strips(&self) -> Result<(Tensor, Tensor, Vec<Rect>)> {
        let size = self.src_patches[0].rect.size;
        if self.src_patches.iter().any(|p| p.rect.size != size) {
            return Err(Error::shape("patches in a batch must share one size"));
        }
        let cat = |ps: &[Patch]| -> Result<Tensor> {
            let ts = ps.iter().map(|p| image_t(&p.pixels)).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&ts, 3)?)
        };
        let rects = (0..self.len()).map(|i| Rect::new(0, i * size, size)).collect();
        Ok((cat(&self.src_patches)?, cat(&self.out_patches)?, rects))
    }
}

pub fn patch_directional_loss(
    batch: &PatchPairBatch,
    texts: &TextTriple,
    backend: &dyn JointEmbedder,
    rng_seed: u64,
) -> Result<f64> {
    let (src, out, rects) = batch.strips()?;
    let (_, _, h, w) = src.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let views = random_views(&rects, batch.n_aug, DEFAULT_DISTORTION, &mut rng)?;
    let sampler = ViewSampler::new(&views, h, w)?;
    let dt = text_direction(backend, texts, DType::F64)?;
    scalar(&directional_t(&out, &src, &sampler, &dt, backend)?)
}

pub fn patch_distribution_consistency_loss(
    batch: &PatchPairBatch,
    src_img: &Image,
    out_img: &Image,
    backend: &dyn JointEmbedder,
) -> Result<f64> {
    let e_src = backend.embed_image(src_img)?.to_tensor(DType::F64, &Device::Cpu)?;
    let e_out = backend.embed_image(out_img)?.to_tensor(DType::F64, &Device::Cpu)?;
    let emb = |ps: &[Patch]| -> Result<Tensor> {
        let rows = backend.embed_image_batch(&ps.iter().map(|p| p.pixels.clone()).collect::<Vec<_>>())?;
        let ts = rows
            .iter()
            .map(|e| e.to_tensor(DType::F64, &Device::Cpu))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    };
    let d_src = cosine_rows(&emb(&batch.src_patches)?, &e_src)?;
    let d_out = cosine_rows(&emb(&batch.out_patches)?, &e_out)?;
    scalar(&jsd_t(&profile_t(&d_src)?, &profile_t(&d_out)?)?)
}

pub fn abp_loss(out_img: &Image, src_img: &Image, bg_star: &BinaryMask) -> Result<f64> {
    bg_star.ensure_matches(out_img.height(), out_img.width())?;
    if (out_img.height(), out_img.width()) != (src_img.height(), src_img.width()) {
        return Err(Error::shape("images differ in size"));
    }
    scalar(&abp_t(&image_t(out_img)?, &image_t(src_img)?, bg_star)?)
}

pub fn content_loss(
    out_img: &Image,
    src_img: &Image,
    backend: &dyn PerceptualExtractor,
    layers: &[String],
) -> Result<f64> {
    backend.check_layers(layers)?;
    scalar(&content_t(&image_t(out_img)?, &image_t(src_img)?, backend, layers)?)
}

pub fn tv_loss(img: &Image) -> Result<f64> {
    scalar(&tv_t(&image_t(img)?)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::backends::{MockJointEmbedder, MockPerceptual, MOCK_IMAGE_MATRIX};
    use crate::grounding::crop_at;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn weights_and_total() {
        let w = LossWeights::default();
        let ones = LossTerms {
            dir: 1.0,
            con: 1.0,
            abp: 1.0,
            content: 1.0,
            tv: 1.0,
        };
        let (t, parts) = total_loss(&ones, &w).unwrap();
        close(t, 75400.002, 1e-9);
        assert_eq!(parts["dir"], 1.5e4);
        assert_eq!(total_loss(&LossTerms::default(), &w).unwrap().0, 0.0);
        let bad = LossTerms {
            abp: f64::NAN,
            ..LossTerms::default()
        };
        assert!(matches!(total_loss(&bad, &w), Err(Error::TrainingDivergence { term, .. }) if term == "abp"));
    }

    #[test]
    fn jsd_fixtures() {
        let d = |v: Vec<f64>| Distribution::new(v).unwrap();
        close(jsd(&d(vec![0.2, 0.3, 0.5]), &d(vec![0.2, 0.3, 0.5])).unwrap(), 0.0, 0.0);
        close(jsd(&d(vec![1.0, 0.0]), &d(vec![0.0, 1.0])).unwrap(), std::f64::consts::LN_2, 1e-12);
        // 0.5·ln(4/3) + 0.5·(0.5·ln(2/3) + 0.5·ln 2)
        let oracle = 0.5 * (1.0f64 / 0.75).ln() + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln());
        let v = jsd(&d(vec![1.0, 0.0]), &d(vec![0.5, 0.5])).unwrap();
        close(v, oracle, 1e-12);
        close(v, 0.2158, 1e-4);
        assert!(matches!(jsd(&d(vec![1.0]), &d(vec![0.5, 0.5])), Err(Error::Shape(_))));
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(matches!(Distribution::from_similarities(&[-0.1, 0.0]), Err(Error::DegenerateSimilarity(_))));
    }

    #[test]
    fn jsd_tensor_matches_scalar() {
        let p = Distribution::from_similarities(&[0.9, 0.3]).unwrap();
        let q = Distribution::from_similarities(&[0.3, 0.9]).unwrap();
        let pt = Tensor::new(p.probs(), &Device::Cpu).unwrap();
        let qt = Tensor::new(q.probs(), &Device::Cpu).unwrap();
        close(scalar(&jsd_t(&pt, &qt).unwrap()).unwrap(), jsd(&p, &q).unwrap(), 1e-12);
    }

    /// Mock text vectors so that `E(target) − E(source)` equals the image
    /// embedding change produced by adding `shift` to the mean colour.
    fn aligned_texts(shift: [f64; 3], sign: f64) -> (MockJointEmbedder, TextTriple) {
        let mut dir = vec![0.0; 8];
        for (r, row) in MOCK_IMAGE_MATRIX.iter().enumerate() {
            dir[r] = sign * (row[0] * shift[0] + row[1] * shift[1] + row[2] * shift[2]);
        }
        let base = vec![0.3, 0.1, 0.2, 0.0, 0.1, 0.0, 0.2, 0.5];
        let tgt: Vec<f64> = base.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let mock = MockJointEmbedder::new()
            .with_text("src thing", base)
            .unwrap()
            .with_text("tgt thing", tgt)
            .unwrap();
        let texts = TextTriple {
            source: "src thing".into(),
            style: "tgt".into(),
            target: "tgt thing".into(),
        };
        (mock, texts)
    }

    fn shifted_pair(shift: [f32; 3]) -> PatchPairBatch {
        let src = Image::from_fn(8, 16, |y, x| [0.3 + 0.01 * y as f32, 0.4, 0.2 + 0.01 * x as f32]);
        let out = Image::from_fn(8, 16, |y, x| {
            let p = src.pixel(y, x);
            [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]
        });
        let rects = [Rect::new(0, 0, 8), Rect::new(0, 8, 8)];
        PatchPairBatch::new(
            rects.iter().map(|&r| crop_at(&src, r).unwrap()).collect(),
            rects.iter().map(|&r| crop_at(&out, r).unwrap()).collect(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn directional_extremes() {
        // A uniform shift moves a warped view's mean colour by the shift
        // times its visible fraction, so ΔP stays parallel to the shift.
        let (mock, texts) = aligned_texts([0.0, 0.2, -0.1], 1.0);
        let batch = shifted_pair([0.0, 0.2, -0.1]);
        let v = patch_directional_loss(&batch, &texts, &mock, 0).unwrap();
        close(v, 0.0, 1e-6);
        let (mock, texts) = aligned_texts([0.0, 0.2, -0.1], -1.0);
        let v = patch_directional_loss(&batch, &texts, &mock, 0).unwrap();
        close(v, 2.0, 1e-6);
    }

    #[test]
    fn directional_half_orthogonal() {
        // Pair 0 shifts the colour along a, pair 1 along b, where the image
        // embedding changes M·a and M·b are orthogonal: with (x, 1, 0) for b,
        // (M a)·(M b) = 1.5·x − 0.25 = 0 gives x = 1/6.
        let a = [1.0, 0.0, 0.0];
        let b = [1.0 / 6.0, 1.0, 0.0];
        let emb = |c: [f64; 3]| MockJointEmbedder::color_embedding(c);
        let zero = emb([0.0; 3]);
        let ea: Vec<f64> = emb(a).iter().zip(&zero).map(|(x, z)| x - z).collect();
        let eb: Vec<f64> = emb(b).iter().zip(&zero).map(|(x, z)| x - z).collect();
        close(ea.iter().zip(&eb).map(|(x, y)| x * y).sum::<f64>(), 0.0, 1e-12);

        let scale = 0.1f32;
        let src = Image::filled(8, 16, [0.4, 0.4, 0.4]);
        let out = Image::from_fn(8, 16, |_, x| {
            let c = if x < 8 { a } else { b };
            [0.4 + scale * c[0] as f32, 0.4 + scale * c[1] as f32, 0.4 + scale * c[2] as f32]
        });
        let rects = [Rect::new(0, 0, 8), Rect::new(0, 8, 8)];
        let batch = PatchPairBatch::new(
            rects.iter().map(|&r| crop_at(&src, r).unwrap()).collect(),
            rects.iter().map(|&r| crop_at(&out, r).unwrap()).collect(),
            1,
        )
        .unwrap();
        let base = vec![0.3, 0.1, 0.2, 0.0, 0.1, 0.0, 0.2, 0.5];
        let tgt: Vec<f64> = base.iter().zip(&ea).map(|(x, d)| x + 3.0 * d).collect();
        let mock = MockJointEmbedder::new()
            .with_text("s", base)
            .unwrap()
            .with_text("t", tgt)
            .unwrap();
        let texts = TextTriple {
            source: "s".into(),
            style: "t".into(),
            target: "t".into(),
        };
        // Vector-arithmetic oracle: mean of (1 − 1) and (1 − 0).
        let v = patch_directional_loss(&batch, &texts, &mock, 5).unwrap();
        close(v, 0.5, 1e-4);
    }

    #[test]
    fn identical_texts_are_degenerate() {
        let batch = shifted_pair([0.1, 0.0, 0.0]);
        let texts = TextTriple {
            source: "apple".into(),
            style: "".into(),
            target: "apple".into(),
        };
        assert!(matches!(
            patch_directional_loss(&batch, &texts, &MockJointEmbedder::new(), 0),
            Err(Error::DegenerateText)
        ));
    }

    #[test]
    fn consistency_fixtures() {
        let src = Image::from_fn(16, 16, |y, x| [(y as f32) / 16.0, (x as f32) / 16.0, 0.5]);
        let rects = [Rect::new(0, 0, 8), Rect::new(8, 8, 8)];
        let patches: Vec<Patch> = rects.iter().map(|&r| crop_at(&src, r).unwrap()).collect();
        let batch = PatchPairBatch::new(patches.clone(), patches.clone(), 1).unwrap();
        let mock = MockJointEmbedder::new();
        close(patch_distribution_consistency_loss(&batch, &src, &src, &mock).unwrap(), 0.0, 1e-15);

        let single = PatchPairBatch::new(vec![patches[0].clone()], vec![crop_at(&Image::filled(16, 16, [0.9, 0.1, 0.3]), rects[0]).unwrap()], 1).unwrap();
        close(
            patch_distribution_consistency_loss(&single, &src, &Image::filled(16, 16, [0.2; 3]), &mock).unwrap(),
            0.0,
            1e-15,
        );
    }

    #[test]
    fn abp_fixtures() {
        let src = Image::filled(64, 64, [0.2; 3]);
        let out = Image::filled(64, 64, [0.8; 3]);
        close(abp_loss(&src, &src, &BinaryMask::ones(64, 64)).unwrap(), 0.0, 1e-12);
        close(abp_loss(&out, &src, &BinaryMask::zeros(64, 64)).unwrap(), 0.0, 0.0);
        let v = abp_loss(&out, &src, &BinaryMask::ones(64, 64)).unwrap();
        // Pixel values are stored as f32.
        let (a, b) = (0.2f32 as f64, 0.8f32 as f64);
        let lum: f64 = (2.0 * a * b + 1e-4) / (a * a + b * b + 1e-4);
        close(v, 1.0 - lum.powf(msssim::level_weights(3)[2]) + (b - a), 1e-12);
    }

    #[test]
    fn content_fixtures() {
        let p = MockPerceptual::new();
        let layers = vec![MockPerceptual::LAYER.to_string()];
        let src = Image::from_fn(8, 8, |y, x| [0.1 * (y % 3) as f32, 0.05 * x as f32, 0.3]);
        close(content_loss(&src, &src, &p, &layers).unwrap(), 0.0, 0.0);
        let out = Image::from_fn(8, 8, |y, x| src.pixel(y, x).map(|v| v + 0.1));
        let mut mse = 0.0;
        for (o, s) in out.data().iter().zip(src.data()) {
            mse += (*o as f64 - *s as f64).powi(2);
        }
        mse /= src.data().len() as f64;
        close(mse, 0.01, 1e-8);
        close(content_loss(&out, &src, &p, &layers).unwrap(), mse, 1e-12);
    }

    /// `mean(dx²) + mean(dy²)` by explicit loops.
    fn tv_oracle(img: &Image) -> f64 {
        let (h, w) = (img.height(), img.width());
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = img.pixel(y, x)[c] as f64;
                    if x + 1 < w {
                        sx += (img.pixel(y, x + 1)[c] as f64 - v).powi(2);
                    }
                    if y + 1 < h {
                        sy += (img.pixel(y + 1, x)[c] as f64 - v).powi(2);
                    }
                }
            }
        }
        sx / (3 * h * (w - 1)) as f64 + sy / (3 * (h - 1) * w) as f64
    }

    #[test]
    fn tv_fixtures() {
        close(tv_loss(&Image::filled(8, 8, [0.3; 3])).unwrap(), 0.0, 0.0);
        let stripes = Image::from_fn(4, 6, |_, x| [(x % 2) as f32; 3]);
        close(tv_loss(&stripes).unwrap(), tv_oracle(&stripes), 1e-12);
        close(tv_loss(&stripes).unwrap(), 1.0, 1e-12);
        let checker = Image::from_fn(8, 8, |y, x| [((x + y) % 2) as f32; 3]);
        close(tv_loss(&checker).unwrap(), 2.0, 1e-12);
        assert!(tv_loss(&Image::filled(1, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn checkerboard_is_maximal_binary_tv() {
        // Exhaustive over 4×4 binary grey images; the checkerboard attains the maximum.
        let mut best = 0.0f64;
        for bits in 0u32..(1 << 16) {
            let img = Image::from_fn(4, 4, |y, x| [((bits >> (y * 4 + x)) & 1) as f32; 3]);
            best = best.max(tv_oracle(&img));
        }
        let checker = Image::from_fn(4, 4, |y, x| [((x + y) % 2) as f32; 3]);
        close(tv_oracle(&checker), best, 0.0);
        close(tv_loss(&checker).unwrap(), best, 1e-12);
    }

    fn smooth(img: &Image) -> Image {
        let (h, w) = (img.height(), img.width());
        Image::from_fn(h, w, |y, x| {
            let mut acc = [0.0f32; 3];
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        let p = img.pixel(yy as usize, xx as usize);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
            }
            acc.map(|v| v / n)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn smoothing_reduces_tv(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = Image::from_fn(16, 16, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
            prop_assert!(tv_loss(&smooth(&noisy)).unwrap() < tv_loss(&noisy).unwrap());
        }
    }

    fn distribution() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..12).prop_filter_map("positive mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 0.0).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded((p, q) in (1usize..12).prop_flat_map(|n| {
            let d = prop::collection::vec(0.0f64..1.0, n);
            (d.clone(), d)
        })) {
            let norm = |v: Vec<f64>| -> Option<Distribution> {
                let s: f64 = v.iter().sum();
                (s > 0.0).then(|| Distribution::new(v.iter().map(|x| x / s).collect()).unwrap())
            };
            if let (Some(p), Some(q)) = (norm(p), norm(q)) {
                let a = jsd(&p, &q).unwrap();
                let b = jsd(&q, &p).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!(a >= 0.0 && a <= std::f64::consts::LN_2 + 1e-9);
                prop_assert_eq!(jsd(&p, &p).unwrap(), 0.0);
            }
        }

        #[test]
        fn jsd_self_is_zero(p in distribution()) {
            let p = Distribution::new(p).unwrap();
            prop_assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn abp_zero_iff_background_equal(seed in any::<u64>(), touch_bg in any::<bool>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = Image::from_fn(16, 16, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
            let bg = BinaryMask::from_fn(16, 16, |_, _| rng.gen_bool(0.5));
            prop_assume!(!bg.is_all_zero() && bg.count_ones() < 256);
            let mut out = src.clone();
            for y in 0..16 {
                for x in 0..16 {
                    if bg.get(y, x) == touch_bg {
                        out.set_pixel(y, x, [rng.gen(), rng.gen(), rng.gen()]);
                    }
                }
            }
            let v = abp_loss(&out, &src, &bg).unwrap();
            if touch_bg {
                prop_assert!(v > 0.0);
            } else {
                prop_assert!(v.abs() < 1e-12, "{}", v);
            }
        }
    }
}
