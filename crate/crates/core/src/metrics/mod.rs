//! Masked foreground/background evaluation of stylized images.
//!
//! Every metric multiplies the images by the relevant mask (zero-fill)
//! before it is computed, so background metrics never see foreground
//! pixels and vice versa.

pub mod dists;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backends::{cosine_similarity, JointEmbedder, PerceptualExtractor};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::losses::msssim;
pub use dists::Dists;

/// PSNR reported for identical backgrounds.
pub const PSNR_CAP: f64 = 100.0;

pub const METRIC_NAMES: [&str; 8] = ["sim_f", "con_f", "l1_b", "con_b", "sty_b", "ssim_b", "dists_b", "psnr_b"];

#[derive(Debug, Clone)]
pub struct EvalTriple {
    pub source: Image,
    pub stylized: Image,
    pub fg_gt: BinaryMask,
    pub target_text: String,
}

impl EvalTriple {
    pub fn new(source: Image, stylized: Image, fg_gt: BinaryMask, target_text: impl Into<String>) -> Result<Self> {
        let (h, w) = (source.height(), source.width());
        if (stylized.height(), stylized.width()) != (h, w) {
            return Err(Error::shape(format!(
                "stylized image is {}x{}, source is {h}x{w}",
                stylized.height(),
                stylized.width()
            )));
        }
        fg_gt.ensure_matches(h, w)?;
        source.ensure_finite()?;
        stylized.ensure_finite()?;
        Ok(Self {
            source,
            stylized,
            fg_gt,
            target_text: target_text.into(),
        })
    }

    pub fn load(entry: &TripleEntry, base: &Path) -> Result<Self> {
        let p = |s: &str| resolve(base, s);
        Self::new(
            Image::load(p(&entry.source))?,
            Image::load(p(&entry.stylized))?,
            BinaryMask::load(p(&entry.mask))?,
            entry.target_text.clone(),
        )
    }

    fn fg(&self) -> Result<&BinaryMask> {
        if self.fg_gt.is_all_zero() {
            return Err(Error::DegenerateMask("foreground mask is empty".into()));
        }
        Ok(&self.fg_gt)
    }

    fn bg(&self) -> Result<BinaryMask> {
        let bg = self.fg_gt.complement();
        if bg.is_all_zero() {
            return Err(Error::DegenerateMask("background mask is empty".into()));
        }
        Ok(bg)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// One manifest row; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleEntry {
    #[serde(default)]
    pub id: Option<String>,
    pub source: String,
    pub stylized: String,
    pub mask: String,
    pub target_text: String,
}

/// Reads a manifest: a JSON list of [`TripleEntry`], or an object holding
/// that list under `"triples"`.
pub fn load_manifest(path: &Path) -> Result<Vec<TripleEntry>> {
    let text = std::fs::read_to_string(path)?;
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Manifest {
        List(Vec<TripleEntry>),
        Wrapped { triples: Vec<TripleEntry> },
    }
    let rows = match serde_json::from_str::<Manifest>(&text)? {
        Manifest::List(v) | Manifest::Wrapped { triples: v } => v,
    };
    if rows.is_empty() {
        return Err(Error::RejectedInput("manifest lists no triples".into()));
    }
    Ok(rows)
}

/// Backends and layer choices shared by all rows of an evaluation.
pub struct MetricBackends<'a> {
    pub joint: &'a dyn JointEmbedder,
    pub perceptual: &'a dyn PerceptualExtractor,
    pub content_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub dists: Option<&'a Dists>,
}

impl<'a> MetricBackends<'a> {
    /// VGG backends use conv4_2 for content and conv1_1..conv4_1 for style;
    /// other backends use all of their layers for both.
    pub fn new(joint: &'a dyn JointEmbedder, perceptual: &'a dyn PerceptualExtractor, dists: Option<&'a Dists>) -> Self {
        let names = perceptual.layer_names();
        let has = |l: &str| names.iter().any(|n| n == l);
        let (content_layers, style_layers) = if has("conv4_2") {
            (
                vec!["conv4_2".to_string()],
                ["conv1_1", "conv2_1", "conv3_1", "conv4_1"].map(String::from).to_vec(),
            )
        } else {
            (names.clone(), names)
        };
        Self {
            joint,
            perceptual,
            content_layers,
            style_layers,
            dists,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sim_f: f64,
    pub con_f: f64,
    pub l1_b: f64,
    pub con_b: f64,
    pub sty_b: f64,
    pub ssim_b: f64,
    /// `None` when the DISTS weights are unavailable.
    pub dists_b: Option<f64>,
    pub psnr_b: f64,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "sim_f" => Some(self.sim_f),
            "con_f" => Some(self.con_f),
            "l1_b" => Some(self.l1_b),
            "con_b" => Some(self.con_b),
            "sty_b" => Some(self.sty_b),
            "ssim_b" => Some(self.ssim_b),
            "dists_b" => self.dists_b,
            "psnr_b" => Some(self.psnr_b),
            _ => None,
        }
    }
}

fn tensor(img: &Image) -> Result<Tensor> {
    img.to_tensor(DType::F64, &Device::Cpu)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Cosine between the target text and the foreground-masked stylized image.
pub fn sim_f(t: &EvalTriple, joint: &dyn JointEmbedder) -> Result<f64> {
    let fg = t.fg()?;
    let img = joint.embed_image(&t.stylized.masked(fg)?)?;
    let txt = joint.embed_text(&t.target_text)?;
    cosine_similarity(&img, &txt)
}

fn content_distance(a: &Image, b: &Image, p: &dyn PerceptualExtractor, layers: &[String]) -> Result<f64> {
    let fa = p.features(&tensor(a)?, layers)?;
    let fb = p.features(&tensor(b)?, layers)?;
    let mut acc = 0.0;
    for l in layers {
        acc += scalar(&(&fa.layers[l] - &fb.layers[l])?.sqr()?.mean_all()?)?;
    }
    Ok(acc)
}

pub fn con_f(t: &EvalTriple, p: &dyn PerceptualExtractor, layers: &[String]) -> Result<f64> {
    let fg = t.fg()?;
    content_distance(&t.stylized.masked(fg)?, &t.source.masked(fg)?, p, layers)
}

pub fn con_b(t: &EvalTriple, p: &dyn PerceptualExtractor, layers: &[String]) -> Result<f64> {
    let bg = t.bg()?;
    content_distance(&t.stylized.masked(&bg)?, &t.source.masked(&bg)?, p, layers)
}

/// Mean absolute background difference on the 0–255 scale, divided by
/// `255 · bg_pixels · 3`.
pub fn l1_b(t: &EvalTriple) -> Result<f64> {
    let bg = t.bg()?;
    let (s, o) = (t.source.data(), t.stylized.data());
    let mut acc = 0.0f64;
    for (i, &on) in bg.values().iter().enumerate() {
        if on != 0 {
            for c in 0..3 {
                acc += ((s[3 * i + c] as f64 - o[3 * i + c] as f64) * 255.0).abs();
            }
        }
    }
    Ok(acc / (255.0 * 3.0 * bg.count_ones() as f64))
}

/// PSNR over background pixels with peak 1, capped at [`PSNR_CAP`].
pub fn psnr_b(t: &EvalTriple) -> Result<f64> {
    let bg = t.bg()?;
    let (s, o) = (t.source.data(), t.stylized.data());
    let mut acc = 0.0f64;
    for (i, &on) in bg.values().iter().enumerate() {
        if on != 0 {
            for c in 0..3 {
                acc += (s[3 * i + c] as f64 - o[3 * i + c] as f64).powi(2);
            }
        }
    }
    let mse = acc / (3.0 * bg.count_ones() as f64);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Single-scale Gaussian SSIM of the background-masked images.
pub fn ssim_b(t: &EvalTriple) -> Result<f64> {
    let bg = t.bg()?;
    scalar(&msssim::ssim(&tensor(&t.stylized.masked(&bg)?)?, &tensor(&t.source.masked(&bg)?)?)?)
}

/// Per-channel spatial mean and (population) variance of a `(1, C, h, w)` map.
fn mean_var(f: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = f.to_dtype(DType::F64)?.flatten_from(2)?.squeeze(0)?;
    let mu = f.mean_keepdim(D::Minus1)?;
    let var = f.broadcast_sub(&mu)?.sqr()?.mean(D::Minus1)?;
    Ok((mu.squeeze(1)?.to_vec1()?, var.to_vec1()?))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Sum over layers of `‖Δmean‖₂ + ‖Δvariance‖₂` between background-masked images.
pub fn sty_b(t: &EvalTriple, p: &dyn PerceptualExtractor, layers: &[String]) -> Result<f64> {
    let bg = t.bg()?;
    let fa = p.features(&tensor(&t.stylized.masked(&bg)?)?, layers)?;
    let fb = p.features(&tensor(&t.source.masked(&bg)?)?, layers)?;
    let mut acc = 0.0;
    for l in layers {
        let (ma, va) = mean_var(&fa.layers[l])?;
        let (mb, vb) = mean_var(&fb.layers[l])?;
        acc += l2(&ma, &mb) + l2(&va, &vb);
    }
    Ok(acc)
}

/// DISTS between background-masked images; `None` without weights.
pub fn dists_b(t: &EvalTriple, dists: Option<&Dists>) -> Result<Option<f64>> {
    let bg = t.bg()?;
    let Some(d) = dists else {
        return Ok(None);
    };
    let a = t.stylized.masked(&bg)?.to_tensor(DType::F32, &Device::Cpu)?;
    let b = t.source.masked(&bg)?.to_tensor(DType::F32, &Device::Cpu)?;
    Ok(Some(d.distance(&a, &b)?))
}

pub fn evaluate(t: &EvalTriple, b: &MetricBackends) -> Result<MetricReport> {
    Ok(MetricReport {
        sim_f: sim_f(t, b.joint)?,
        con_f: con_f(t, b.perceptual, &b.content_layers)?,
        l1_b: l1_b(t)?,
        con_b: con_b(t, b.perceptual, &b.content_layers)?,
        sty_b: sty_b(t, b.perceptual, &b.style_layers)?,
        ssim_b: ssim_b(t)?,
        dists_b: dists_b(t, b.dists)?,
        psnr_b: psnr_b(t)?,
    })
}

/// Input of one batch row: the manifest entry and the loaded triple (or why it failed to load).
pub struct BatchInput {
    pub id: String,
    pub entry: Option<TripleEntry>,
    pub triple: Result<EvalTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOutcome {
    pub id: String,
    pub entry: Option<TripleEntry>,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub total_rows: usize,
    pub valid_rows: usize,
    pub failed_rows: Vec<String>,
    /// Means over valid rows; `dists_b` is absent when no row has it.
    pub means: BTreeMap<String, f64>,
    /// Rows contributing to each mean.
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub rows: Vec<RowOutcome>,
    pub aggregate: Aggregate,
}

/// Loads every manifest entry, keeping load failures as row errors.
pub fn load_batch(entries: &[TripleEntry], base: &Path) -> Vec<BatchInput> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| BatchInput {
            id: e.id.clone().unwrap_or_else(|| format!("row{i}")),
            entry: Some(e.clone()),
            triple: EvalTriple::load(e, base),
        })
        .collect()
}

/// Evaluates rows on up to `jobs` threads; failures are recorded per row.
pub fn evaluate_batch(inputs: Vec<BatchInput>, b: &MetricBackends, jobs: usize) -> Result<BatchReport> {
    if inputs.is_empty() {
        return Err(Error::RejectedInput("nothing to evaluate".into()));
    }
    let jobs = jobs.clamp(1, inputs.len());
    let chunk = inputs.len().div_ceil(jobs);
    let results: Vec<Result<MetricReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|rows| {
                s.spawn(move || {
                    rows.iter()
                        .map(|r| match &r.triple {
                            Ok(t) => evaluate(t, b),
                            Err(e) => Err(Error::RejectedInput(e.to_string())),
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let rows: Vec<RowOutcome> = inputs
        .into_iter()
        .zip(results)
        .map(|(input, res)| {
            let (report, error) = match res {
                Ok(r) => (Some(r), None),
                Err(e) => {
                    let msg = match input.triple {
                        Err(load) => load.to_string(),
                        Ok(_) => e.to_string(),
                    };
                    log::warn!("row {}: {msg}", input.id);
                    (None, Some(msg))
                }
            };
            RowOutcome {
                id: input.id,
                entry: input.entry,
                report,
                error,
            }
        })
        .collect();
    let aggregate = aggregate(&rows);
    Ok(BatchReport { rows, aggregate })
}

pub fn aggregate(rows: &[RowOutcome]) -> Aggregate {
    let valid: Vec<&MetricReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    let mut means = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for name in METRIC_NAMES {
        let vals: Vec<f64> = valid.iter().filter_map(|r| r.get(name)).collect();
        counts.insert(name.to_string(), vals.len());
        if !vals.is_empty() {
            means.insert(name.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Aggregate {
        total_rows: rows.len(),
        valid_rows: valid.len(),
        failed_rows: rows.iter().filter(|r| r.error.is_some()).map(|r| r.id.clone()).collect(),
        means,
        counts,
    }
}

impl BatchReport {
    /// One row per triple; `dists_b` reads "skipped" when unavailable and
    /// metric cells are empty for failed rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["id", "source", "stylized", "mask", "target_text"];
        header.extend(METRIC_NAMES);
        header.push("error");
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let e = r.entry.as_ref();
            let field = |f: fn(&TripleEntry) -> &str| e.map(f).unwrap_or("").to_string();
            let mut rec = vec![
                r.id.clone(),
                field(|e| &e.source),
                field(|e| &e.stylized),
                field(|e| &e.mask),
                field(|e| &e.target_text),
            ];
            for name in METRIC_NAMES {
                rec.push(match (&r.report, name) {
                    (None, _) => String::new(),
                    (Some(m), "dists_b") => m.dists_b.map_or_else(|| "skipped".to_string(), |v| v.to_string()),
                    (Some(m), n) => m.get(n).map(|v| v.to_string()).unwrap_or_default(),
                });
            }
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
