//! Text-matched patch selection, grid voting for a fixed foreground, and the
//! per-iteration masks derived from selected patches.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use ::image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Embedding, JointEmbedder};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, Rect};

/// Smallest admissible patch side.
pub const MIN_PATCH_SIZE: usize = 8;
/// Resolution at which the default patch sizes are expressed.
pub const REFERENCE_RESOLUTION: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub rect: Rect,
    pub pixels: Image,
}

/// Exact copy of the pixels under `rect`.
pub fn crop_at(img: &Image, rect: Rect) -> Result<Patch> {
    Ok(Patch {
        rect,
        pixels: img.crop(rect)?,
    })
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmpsParams {
    /// Size of the seed set; `None` means `min(K, max(5, round(0.1·K)))`.
    pub m: Option<usize>,
    pub hard_floor: f64,
}

impl Default for TmpsParams {
    fn default() -> Self {
        Self { m: None, hard_floor: 0.8 }
    }
}

impl TmpsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.hard_floor > 0.0 && self.hard_floor < 1.0) {
            return Err(Error::config("hard floor must lie in (0, 1)"));
        }
        if self.m == Some(0) {
            return Err(Error::config("M must be at least 1"));
        }
        Ok(())
    }

    pub fn resolve_m(&self, k: usize) -> Result<usize> {
        match self.m {
            Some(m) if m >= 1 && m <= k => Ok(m),
            Some(m) => Err(Error::config(format!("M = {m} outside 1..={k}"))),
            None => Ok(k.min(5.max(round_half_up(0.1 * k as f64)))),
        }
    }

    /// Rank of the cut-off in the second stage: `round(K/2)`, at least 1.
    pub fn median_rank(k: usize) -> usize {
        round_half_up(k as f64 / 2.0).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSelection {
    /// Ascending indices into the candidate list.
    pub indices: Vec<usize>,
    pub patches: Vec<Patch>,
    /// Similarity to the seed average for each selected patch.
    pub similarities: Vec<f64>,
    /// Similarity to the text for every candidate, in candidate order.
    pub text_similarities: Vec<f64>,
}

impl PatchSelection {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn rects(&self) -> Vec<Rect> {
        self.patches.iter().map(|p| p.rect).collect()
    }

    pub fn max_text_similarity(&self) -> f64 {
        self.text_similarities.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    d.clamp(-1.0, 1.0)
}

/// Value of the `rank`-th largest entry (1-based).
fn kth_largest(values: &[f64], rank: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[rank - 1]
}

/// Two-stage selection on precomputed embeddings; returns the selected
/// indices (ascending), their seed similarities, and every text similarity.
///
/// Rank cut-offs are values: every candidate tied with the cut-off is kept,
/// so the selected set does not depend on candidate order.
pub fn tmps_from_embeddings(
    embeddings: &[Vec<f64>],
    text: &[f64],
    params: &TmpsParams,
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let k = embeddings.len();
    if k == 0 {
        return Err(Error::DegenerateInput("no candidate patches".into()));
    }
    if dot(text, text) == 0.0 {
        return Err(Error::DegenerateInput("text embedding has zero norm".into()));
    }
    if let Some(i) = embeddings.iter().position(|e| e.len() != text.len()) {
        return Err(Error::shape(format!("candidate {i} has a different embedding dimension")));
    }
    if embeddings.iter().any(|e| dot(e, e) == 0.0) {
        return Err(Error::DegenerateInput("a candidate embedding has zero norm".into()));
    }
    let m = params.resolve_m(k)?;

    let s: Vec<f64> = embeddings.iter().map(|f| cosine(f, text)).collect();
    let cut = kth_largest(&s, m);
    let mut seed: Vec<&Vec<f64>> = (0..k).filter(|&i| s[i] >= cut).map(|i| &embeddings[i]).collect();
    // Summation order fixed by content rather than by candidate position.
    seed.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let mut f_avg = vec![0.0; text.len()];
    for f in &seed {
        for (a, v) in f_avg.iter_mut().zip(f.iter()) {
            *a += v;
        }
    }
    let n = seed.len() as f64;
    f_avg.iter_mut().for_each(|a| *a /= n);
    if dot(&f_avg, &f_avg) == 0.0 {
        return Err(Error::DegenerateInput("seed patches average to a zero embedding".into()));
    }

    let s_hat: Vec<f64> = embeddings.iter().map(|f| cosine(f, &f_avg)).collect();
    let cut_hat = kth_largest(&s_hat, TmpsParams::median_rank(k));
    let indices: Vec<usize> = (0..k)
        .filter(|&j| s_hat[j] >= cut_hat && s_hat[j] > params.hard_floor)
        .collect();
    let sims = indices.iter().map(|&j| s_hat[j]).collect();
    Ok((indices, sims, s))
}

/// Embeds candidates in batches of equal size.
pub fn embed_patches(candidates: &[Patch], backend: &dyn JointEmbedder) -> Result<Vec<Vec<f64>>> {
    let mut by_size: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in candidates.iter().enumerate() {
        by_size.entry((p.pixels.height(), p.pixels.width())).or_default().push(i);
    }
    let mut out = vec![Vec::new(); candidates.len()];
    for idx in by_size.values() {
        let imgs: Vec<Image> = idx.iter().map(|&i| candidates[i].pixels.clone()).collect();
        for (&i, e) in idx.iter().zip(backend.embed_image_batch(&imgs)?) {
            out[i] = e.values().to_vec();
        }
    }
    Ok(out)
}

pub fn tmps_select(
    candidates: &[Patch],
    source_text: &str,
    backend: &dyn JointEmbedder,
    params: &TmpsParams,
) -> Result<PatchSelection> {
    if candidates.is_empty() {
        return Err(Error::DegenerateInput("no candidate patches".into()));
    }
    let text: Embedding = backend.embed_text(source_text)?;
    let embeddings = embed_patches(candidates, backend)?;
    let (indices, similarities, text_similarities) = tmps_from_embeddings(&embeddings, text.values(), params)?;
    let patches = indices.iter().map(|&i| candidates[i].clone()).collect();
    Ok(PatchSelection {
        indices,
        patches,
        similarities,
        text_similarities,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrsParams {
    pub grid_side: usize,
    /// Three distinct sides; `None` scales 64/96/128 from a 512-pixel image.
    pub patch_sizes: Option<[usize; 3]>,
    pub tau: u32,
}

impl Default for PrsParams {
    fn default() -> Self {
        Self {
            grid_side: 9,
            patch_sizes: None,
            tau: 2,
        }
    }
}

/// Scales a side given at the reference resolution to an image whose shorter side is `side`.
pub fn scaled_size(reference: usize, side: usize) -> usize {
    round_half_up(reference as f64 * side as f64 / REFERENCE_RESOLUTION as f64).max(1)
}

impl PrsParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side == 0 {
            return Err(Error::config("grid side must be at least 1"));
        }
        if self.tau == 0 {
            return Err(Error::config("vote threshold must be at least 1"));
        }
        if let Some(s) = self.patch_sizes {
            if s[0] == s[1] || s[1] == s[2] || s[0] == s[2] {
                return Err(Error::config("the three patch sizes must be distinct"));
            }
        }
        Ok(())
    }

    pub fn sizes_for(&self, height: usize, width: usize) -> [usize; 3] {
        self.patch_sizes
            .unwrap_or_else(|| [64, 96, 128].map(|s| scaled_size(s, height.min(width))))
    }

    /// Pixel centre of grid cell `i` along an axis of length `len`.
    pub fn cell_center(&self, i: usize, len: usize) -> usize {
        ((i as f64 + 0.5) * len as f64 / self.grid_side as f64).floor() as usize
    }

    /// Candidate rects: per grid cell (row-major), the three sizes in ascending order,
    /// each centred on the cell and shifted inside the image where needed.
    pub fn candidate_rects(&self, height: usize, width: usize) -> Result<Vec<Rect>> {
        self.validate()?;
        let mut sizes = self.sizes_for(height, width);
        sizes.sort_unstable();
        if sizes[0] < MIN_PATCH_SIZE {
            return Err(Error::shape(format!(
                "patch size {} is below the minimum of {MIN_PATCH_SIZE}",
                sizes[0]
            )));
        }
        let mut out = Vec::with_capacity(3 * self.grid_side * self.grid_side);
        for gy in 0..self.grid_side {
            for gx in 0..self.grid_side {
                let (cy, cx) = (self.cell_center(gy, height), self.cell_center(gx, width));
                for &s in &sizes {
                    out.push(Rect::centered_clamped(cy, cx, s, height, width)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VotingMatrix {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

impl VotingMatrix {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            counts: vec![0; height * width],
        }
    }

    pub fn from_rects(height: usize, width: usize, rects: &[Rect]) -> Self {
        let mut v = Self::zeros(height, width);
        for r in rects {
            v.add_rect(*r);
        }
        v
    }

    pub fn add_rect(&mut self, r: Rect) {
        for y in r.top..(r.top + r.size).min(self.height) {
            let row = y * self.width;
            for x in r.left..(r.left + r.size).min(self.width) {
                self.counts[row + x] += 1;
            }
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn threshold(&self, tau: u32) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, x) >= tau)
    }

    /// Raw counts as a 16-bit grayscale PNG (saturating at 65535).
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(y as usize, x as usize).min(u16::MAX as u32) as u16])
        });
        buf.save(path.as_ref())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PrsOutcome {
    pub mask: BinaryMask,
    pub votes: VotingMatrix,
    pub candidates: Vec<Rect>,
    pub selection: PatchSelection,
}

impl PrsOutcome {
    /// Whether the text was located: a non-empty mask backed by at least one
    /// candidate with positive text similarity.
    pub fn is_grounded(&self) -> bool {
        !self.mask.is_all_zero() && self.selection.max_text_similarity() > 0.0
    }
}

pub fn prs_build_foreground(
    img: &Image,
    source_text: &str,
    backend: &dyn JointEmbedder,
    params: &PrsParams,
    tmps: &TmpsParams,
) -> Result<PrsOutcome> {
    img.ensure_finite()?;
    let (h, w) = (img.height(), img.width());
    let candidates = params.candidate_rects(h, w)?;
    let patches = candidates
        .iter()
        .map(|&r| crop_at(img, r))
        .collect::<Result<Vec<_>>>()?;
    let selection = tmps_select(&patches, source_text, backend, tmps)?;
    let votes = VotingMatrix::from_rects(h, w, &selection.rects());
    let mask = votes.threshold(params.tau);
    log::debug!(
        "grid voting: {} of {} candidates selected, {} foreground pixels",
        selection.indices.len(),
        candidates.len(),
        mask.count_ones()
    );
    Ok(PrsOutcome {
        mask,
        votes,
        candidates,
        selection,
    })
}

/// Fraction of grid cells whose centre pixel lies in `fg`.
pub fn foreground_cell_fraction(fg: &BinaryMask, grid_side: usize) -> f64 {
    let p = PrsParams {
        grid_side,
        ..PrsParams::default()
    };
    let mut hits = 0;
    for gy in 0..grid_side {
        for gx in 0..grid_side {
            if fg.get(p.cell_center(gy, fg.height()), p.cell_center(gx, fg.width())) {
                hits += 1;
            }
        }
    }
    hits as f64 / (grid_side * grid_side) as f64
}

/// Per-iteration patch count once the foreground is fixed.
pub fn patches_for_foreground(fg: &BinaryMask, grid_side: usize, base_count: usize) -> usize {
    ((foreground_cell_fraction(fg, grid_side) * base_count as f64).ceil() as usize).max(1)
}

/// `n` square patches whose centres are drawn uniformly from the `fg` pixels.
/// A patch that would cross the border is shifted inwards, so it always
/// contains its sampled centre.
pub fn sample_foreground_patches(
    img: &Image,
    fg: &BinaryMask,
    n: usize,
    size: usize,
    rng_seed: u64,
) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_foreground_rects(fg, n, size, &mut rng)?
        .into_iter()
        .map(|r| crop_at(img, r))
        .collect()
}

pub fn sample_foreground_rects(fg: &BinaryMask, n: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<Rect>> {
    if n == 0 {
        return Err(Error::config("patch count must be at least 1"));
    }
    if size < MIN_PATCH_SIZE {
        return Err(Error::config(format!("patch size must be at least {MIN_PATCH_SIZE}")));
    }
    let (h, w) = (fg.height(), fg.width());
    let on: Vec<usize> = fg
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| i)
        .collect();
    if on.is_empty() {
        return Err(Error::DegenerateInput("foreground mask is empty".into()));
    }
    (0..n)
        .map(|_| {
            let p = on[rng.gen_range(0..on.len())];
            Rect::centered_clamped(p / w, p % w, size, h, w)
        })
        .collect()
}

/// Union of the patch rects and its complement.
pub fn adaptive_masks(rects: &[Rect], height: usize, width: usize) -> Result<(BinaryMask, BinaryMask)> {
    let mut fg = BinaryMask::zeros(height, width);
    for r in rects {
        if !r.fits(height, width) {
            return Err(Error::shape(format!("{r:?} outside {height}x{width}")));
        }
        fg.fill_rect(*r);
    }
    let bg = fg.complement();
    Ok((fg, bg))
}

/// Same as [`adaptive_masks`] for patch lists.
pub fn adaptive_masks_for(patches: &[Patch], height: usize, width: usize) -> Result<(BinaryMask, BinaryMask)> {
    adaptive_masks(&patches.iter().map(|p| p.rect).collect::<Vec<_>>(), height, width)
}

/// The mask drawn over the image in red at `alpha`.
pub fn overlay(img: &Image, mask: &BinaryMask, alpha: f32) -> Result<Image> {
    if (mask.height(), mask.width()) != (img.height(), img.width()) {
        return Err(Error::shape("mask and image sizes differ"));
    }
    Ok(Image::from_fn(img.height(), img.width(), |y, x| {
        let p = img.pixel(y, x);
        if mask.get(y, x) {
            [p[0] * (1.0 - alpha) + alpha, p[1] * (1.0 - alpha), p[2] * (1.0 - alpha)]
        } else {
            p
        }
    }))
}
