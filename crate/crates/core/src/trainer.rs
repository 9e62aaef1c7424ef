//! Per-scene optimisation: a fresh network is fitted to one image and one
//! pair of texts.
//!
//! Before `early_iters`, patches are sampled over the whole image. At step
//! `early_iters` the grid-voting foreground is computed once from the
//! source image; afterwards patches are sampled inside it, with a count
//! proportional to the foreground's share of grid cells. Every step
//! re-selects text-matched patches, builds the adaptive background mask from
//! them, and takes one Adam step on the weighted objective.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{cosine_rows, Embedding, JointEmbedder, PerceptualExtractor};
use crate::error::{Error, Result};
use crate::grounding::{
    adaptive_masks, patches_for_foreground, prs_build_foreground, sample_foreground_rects, scaled_size,
    tmps_from_embeddings, PrsParams, TmpsParams, MIN_PATCH_SIZE,
};
use crate::image::{BinaryMask, Image, Rect};
use crate::losses::{
    abp_t, consistency_t, content_t, directional_t, random_views, text_direction, tv_t, LossTerms, LossWeights,
    ViewSampler, DEFAULT_DISTORTION, DEFAULT_N_AUG,
};
use crate::stylenet::{StyleNetConfig, StyleNetState};
use crate::text::{compose_target_with, PhraseParser, RuleParser, TextTriple};

/// How output patches are chosen for the patch losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutPatchMode {
    /// Output crops at the rects selected on the source.
    Paired,
    /// Selection is re-run on the output crops against the target text and
    /// intersected with the source selection.
    Tmps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub early_iters: usize,
    pub lr: f64,
    pub lr_halve_at: usize,
    pub optimizer: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub resolution: usize,
    pub weights: LossWeights,
    pub tmps: TmpsParams,
    pub prs: PrsParams,
    /// Side of the per-iteration patches; `None` scales 128 from 512.
    pub patch_size: Option<usize>,
    /// Patch count per iteration with the whole image as foreground.
    pub base_patch_count: usize,
    pub n_aug: usize,
    pub distortion: f64,
    /// `None` uses the perceptual backend's default layers.
    pub content_layers: Option<Vec<String>>,
    pub out_patch_mode: OutPatchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 200,
            early_iters: 20,
            lr: 5e-4,
            lr_halve_at: 100,
            optimizer: "adam".into(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            resolution: 512,
            weights: LossWeights::default(),
            tmps: TmpsParams::default(),
            prs: PrsParams::default(),
            patch_size: None,
            base_patch_count: 64,
            n_aug: DEFAULT_N_AUG,
            distortion: DEFAULT_DISTORTION,
            content_layers: None,
            out_patch_mode: OutPatchMode::Paired,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("total_iters must be at least 1"));
        }
        if self.early_iters > self.total_iters {
            return Err(Error::config("early_iters must not exceed total_iters"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.optimizer != "adam" {
            return Err(Error::config(format!("unsupported optimizer '{}'", self.optimizer)));
        }
        if self.n_aug == 0 || self.base_patch_count == 0 {
            return Err(Error::config("n_aug and base_patch_count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.distortion) {
            return Err(Error::config("distortion must lie in [0, 1]"));
        }
        self.weights.validate()?;
        self.tmps.validate()?;
        self.prs.validate()?;
        StyleNetConfig::with_resolution(self.resolution).validate()?;
        let smallest = self.prs.sizes_for(self.resolution, self.resolution).into_iter().min().unwrap_or(0);
        if smallest < MIN_PATCH_SIZE {
            return Err(Error::config(format!(
                "grid patch size {smallest} at resolution {} is below {MIN_PATCH_SIZE}",
                self.resolution
            )));
        }
        let ps = self.patch_size();
        if ps < MIN_PATCH_SIZE || ps > self.resolution {
            return Err(Error::config(format!("patch size {ps} outside {MIN_PATCH_SIZE}..={}", self.resolution)));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size.unwrap_or_else(|| scaled_size(128, self.resolution))
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.lr_halve_at {
            self.lr
        } else {
            self.lr * 0.5
        }
    }

    /// 1-based step at which the fixed foreground is computed.
    pub fn prs_step(&self) -> usize {
        self.early_iters.max(1)
    }
}

#[derive(Debug, Clone)]
pub struct SceneJob {
    pub source_image: Image,
    pub source_text: String,
    pub style_text: String,
    pub config: TrainConfig,
}

impl SceneJob {
    pub fn validate(&self) -> Result<()> {
        if self.source_text.trim().is_empty() || self.style_text.trim().is_empty() {
            return Err(Error::RejectedInput("source and style texts must be non-empty".into()));
        }
        self.config.validate()?;
        let r = self.config.resolution;
        if (self.source_image.height(), self.source_image.width()) != (r, r) {
            return Err(Error::shape(format!(
                "image is {}x{}, config expects {r}x{r}",
                self.source_image.height(),
                self.source_image.width()
            )));
        }
        self.source_image.ensure_finite()
    }
}

pub struct TrainBackends<'a> {
    pub joint: &'a dyn JointEmbedder,
    pub perceptual: &'a dyn PerceptualExtractor,
    pub parser: &'a dyn PhraseParser,
}

impl<'a> TrainBackends<'a> {
    pub fn new(joint: &'a dyn JointEmbedder, perceptual: &'a dyn PerceptualExtractor) -> Self {
        Self {
            joint,
            perceptual,
            parser: &RuleParser,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// JSON-lines log, one record per step.
    pub log_path: Option<PathBuf>,
    /// Final checkpoint; also written on divergence with the last good state.
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Early,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub phase: Phase,
    pub patches: usize,
    pub selected: usize,
    /// Unweighted component values.
    pub terms: LossTerms,
    /// Weighted components and their `total`.
    pub weighted: BTreeMap<String, f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub texts: TextTriple,
    pub steps: Vec<StepRecord>,
    pub prs_step: usize,
    pub foreground_pixels: usize,
    #[serde(skip)]
    pub foreground_mask: Option<BinaryMask>,
    pub wall_seconds: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub optimizer: OptimizerInfo,
    pub parameters: usize,
}

impl TrainReport {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.lr).collect()
    }

    pub fn term_trace(&self, name: &str) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| match name {
                "dir" => s.terms.dir,
                "con" => s.terms.con,
                "abp" => s.terms.abp,
                "content" => s.terms.content,
                "tv" => s.terms.tv,
                _ => s.weighted.get(name).copied().unwrap_or(f64::NAN),
            })
            .collect()
    }
}

fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn embeddings_of(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Selection on the crops at `rects` of `img`, against `text`.
fn select(
    img: &Tensor,
    rects: &[Rect],
    text: &Embedding,
    joint: &dyn JointEmbedder,
    params: &TmpsParams,
) -> Result<Vec<usize>> {
    let (_, _, h, w) = img.dims4()?;
    let crops = ViewSampler::crops(rects, h, w)?.gather(&img.detach())?;
    let emb = embeddings_of(&joint.embed_images(&crops)?)?;
    let mut p = params.clone();
    if let Some(m) = p.m {
        p.m = Some(m.min(rects.len()));
    }
    Ok(tmps_from_embeddings(&emb, text.values(), &p)?.0)
}

pub fn train_scene(
    job: &SceneJob,
    backends: &TrainBackends,
    options: &TrainOptions,
) -> Result<(StyleNetState, TrainReport)> {
    job.validate()?;
    let cfg = &job.config;
    let start = Instant::now();
    let texts = compose_target_with(backends.parser, &job.source_text, &job.style_text)?;
    let joint = backends.joint;
    let layers = cfg
        .content_layers
        .clone()
        .unwrap_or_else(|| backends.perceptual.default_content_layers());
    backends.perceptual.check_layers(&layers)?;

    let src = job.source_image.to_tensor(DType::F32, &Device::Cpu)?;
    let delta_t = text_direction(joint, &texts, DType::F32)?;
    let src_text = joint.embed_text(&texts.source)?;
    let tgt_text = joint.embed_text(&texts.target)?;

    let mut state = StyleNetState::init(StyleNetConfig::with_resolution(cfg.resolution), cfg.seed)?;
    let mut opt = AdamW::new(
        state.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut log = match &options.log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };

    let (h, w) = (cfg.resolution, cfg.resolution);
    let size = cfg.patch_size();
    let mut region = BinaryMask::ones(h, w);
    let mut n_patches = cfg.base_patch_count;
    let mut fixed_mask: Option<BinaryMask> = None;
    let mut steps = Vec::with_capacity(cfg.total_iters);
    let wts = cfg.weights;

    for step in 1..=cfg.total_iters {
        let t0 = Instant::now();
        if fixed_mask.is_none() && step >= cfg.prs_step() {
            let outcome = prs_build_foreground(&job.source_image, &texts.source, joint, &cfg.prs, &cfg.tmps)?;
            if !outcome.is_grounded() {
                return Err(Error::GroundingFailure {
                    text: job.source_text.clone(),
                });
            }
            n_patches = patches_for_foreground(&outcome.mask, cfg.prs.grid_side, cfg.base_patch_count);
            region = outcome.mask.clone();
            log::info!(
                "step {step}: foreground fixed with {} pixels, {n_patches} patches per step",
                region.count_ones()
            );
            fixed_mask = Some(outcome.mask);
        }
        let lr = cfg.lr_at(step);
        opt.set_learning_rate(lr);

        let rects = sample_foreground_rects(&region, n_patches, size, &mut rng)?;
        let sel = select(&src, &rects, &src_text, joint, &cfg.tmps)?;
        let sel_rects: Vec<Rect> = sel.iter().map(|&i| rects[i]).collect();
        let (_, bg_star) = adaptive_masks(&sel_rects, h, w)?;

        let out = state.forward_tensor(&src)?;
        let pair_rects: Vec<Rect> = match cfg.out_patch_mode {
            OutPatchMode::Paired => sel_rects.clone(),
            OutPatchMode::Tmps if sel_rects.is_empty() => Vec::new(),
            OutPatchMode::Tmps => {
                let out_sel = select(&out, &sel_rects, &tgt_text, joint, &cfg.tmps)?;
                out_sel.iter().map(|&i| sel_rects[i]).collect()
            }
        };

        let zero = Tensor::zeros((), DType::F32, &Device::Cpu)?;
        let (dir, con) = if pair_rects.is_empty() {
            (zero.clone(), zero.clone())
        } else {
            let views = random_views(&pair_rects, cfg.n_aug, cfg.distortion, &mut rng)?;
            let sampler = ViewSampler::new(&views, h, w)?;
            let crops = ViewSampler::crops(&pair_rects, h, w)?;
            (
                directional_t(&out, &src, &sampler, &delta_t, joint)?,
                consistency_t(&out, &src, &crops, joint)?,
            )
        };
        let abp = abp_t(&out, &src, &bg_star)?;
        let content = content_t(&out, &src, backends.perceptual, &layers)?;
        let tv = tv_t(&out)?;

        let terms = LossTerms {
            dir: to_f64(&dir)?,
            con: to_f64(&con)?,
            abp: to_f64(&abp)?,
            content: to_f64(&content)?,
            tv: to_f64(&tv)?,
        };
        let weighted = match crate::losses::total_loss(&terms, &wts) {
            Ok((_, parts)) => parts,
            Err(Error::TrainingDivergence { term, .. }) => {
                let last_good_checkpoint = match &options.checkpoint_path {
                    Some(p) => {
                        state.save_checkpoint(p)?;
                        Some(p.clone())
                    }
                    None => None,
                };
                return Err(Error::TrainingDivergence {
                    step,
                    term,
                    last_good_checkpoint,
                });
            }
            Err(e) => return Err(e),
        };
        let total = ((((dir * wts.lambda_dir)? + (con * wts.lambda_con)?)? + (abp * wts.lambda_abp)?)?
            + ((content * wts.lambda_c)? + (tv * wts.lambda_tv)?)?)?;
        opt.backward_step(&total)?;
        state.step = step;

        let record = StepRecord {
            step,
            lr,
            phase: if fixed_mask.is_some() { Phase::Fixed } else { Phase::Early },
            patches: rects.len(),
            selected: sel_rects.len(),
            terms,
            weighted,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!("step {step}: total {:.6}", record.weighted["total"]);
        if let Some(f) = log.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        steps.push(record);
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    if let Some(p) = &options.checkpoint_path {
        state.save_checkpoint(p)?;
    }
    let mask = fixed_mask.unwrap_or_else(|| BinaryMask::ones(h, w));
    let report = TrainReport {
        texts,
        steps,
        prs_step: cfg.prs_step(),
        foreground_pixels: mask.count_ones(),
        foreground_mask: Some(mask),
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint_path: options.checkpoint_path.clone(),
        optimizer: OptimizerInfo {
            name: cfg.optimizer.clone(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
        parameters: state.parameter_count(),
    };
    log::info!(
        "trained {} steps in {:.2}s",
        report.steps.len(),
        report.wall_seconds
    );
    Ok((state, report))
}

/// One forward pass of a trained network.
pub fn stylize(state: &StyleNetState, img: &Image) -> Result<Image> {
    state.forward(img)
}

/// Writes `report` as pretty JSON.
pub fn save_report(report: &TrainReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// Cosine between the image-embedding change of `out` over `src` and the text direction.
pub fn global_direction_cosine(
    joint: &dyn JointEmbedder,
    src: &Image,
    out: &Image,
    texts: &TextTriple,
) -> Result<f64> {
    let e = |img: &Image| -> Result<Tensor> { joint.embed_images(&img.to_tensor(DType::F64, &Device::Cpu)?) };
    let dp = (e(out)? - e(src)?)?;
    let dt = text_direction(joint, texts, DType::F64)?;
    to_f64(&cosine_rows(&dp, &dt)?.squeeze(0)?)
}
