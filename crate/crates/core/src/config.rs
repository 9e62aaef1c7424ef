//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Values set later through [`RunConfig::set`] (command-line
//! overrides) replace those read from a file, which replace the defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::BackendOptions;
use crate::error::{Error, Result};
use crate::trainer::{OutPatchMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub joint_backend: String,
    pub perceptual_backend: String,
    pub weights_dir: Option<PathBuf>,
    /// Prompt template with a `{}` placeholder; `None` encodes raw text.
    pub text_template: Option<String>,
    /// `rules` or `conllu:<command>`.
    pub parser: String,
    pub mock_text_vectors: BTreeMap<String, Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            joint_backend: "clip-vit-b32".into(),
            perceptual_backend: "vgg19".into(),
            weights_dir: None,
            text_template: None,
            parser: "rules".into(),
            mock_text_vectors: BTreeMap::new(),
        }
    }
}

/// Every recognised key with its default, in file order.
pub const KEYS: [&str; 29] = [
    "total_iters",
    "early_iters",
    "lr",
    "lr_halve_at",
    "optimizer",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "resolution",
    "lambda_dir",
    "lambda_con",
    "lambda_abp",
    "lambda_c",
    "lambda_tv",
    "tmps.m",
    "tmps.hard_floor",
    "prs.grid_side",
    "prs.patch_sizes",
    "prs.tau",
    "patch_size",
    "base_patch_count",
    "n_aug",
    "distortion",
    "content_layers",
    "out_patch_mode",
    "joint_backend",
    "perceptual_backend",
    "parser",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn auto<T>(v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "total_iters" => t.total_iters = parse(key, v)?,
            "early_iters" => t.early_iters = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_halve_at" => t.lr_halve_at = parse(key, v)?,
            "optimizer" => t.optimizer = v.to_string(),
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "resolution" => t.resolution = parse(key, v)?,
            "lambda_dir" => t.weights.lambda_dir = parse(key, v)?,
            "lambda_con" => t.weights.lambda_con = parse(key, v)?,
            "lambda_abp" => t.weights.lambda_abp = parse(key, v)?,
            "lambda_c" => t.weights.lambda_c = parse(key, v)?,
            "lambda_tv" => t.weights.lambda_tv = parse(key, v)?,
            "tmps.m" => t.tmps.m = auto(v, |s| parse(key, s))?,
            "tmps.hard_floor" => t.tmps.hard_floor = parse(key, v)?,
            "prs.grid_side" => t.prs.grid_side = parse(key, v)?,
            "prs.patch_sizes" => {
                t.prs.patch_sizes = auto(v, |s| {
                    let l: Vec<usize> = parse_list(key, s)?;
                    l.try_into()
                        .map_err(|_| Error::config("prs.patch_sizes needs exactly three sizes"))
                })?
            }
            "prs.tau" => t.prs.tau = parse(key, v)?,
            "patch_size" => t.patch_size = auto(v, |s| parse(key, s))?,
            "base_patch_count" => t.base_patch_count = parse(key, v)?,
            "n_aug" => t.n_aug = parse(key, v)?,
            "distortion" => t.distortion = parse(key, v)?,
            "content_layers" => {
                t.content_layers = auto(v, |s| Ok(s.split(',').map(|l| l.trim().to_string()).collect()))?
            }
            "out_patch_mode" => {
                t.out_patch_mode = match v {
                    "paired" => OutPatchMode::Paired,
                    "tmps" => OutPatchMode::Tmps,
                    _ => return Err(Error::config(format!("out_patch_mode must be 'paired' or 'tmps', got '{v}'"))),
                }
            }
            "joint_backend" => self.joint_backend = v.to_string(),
            "perceptual_backend" => self.perceptual_backend = v.to_string(),
            "weights_dir" => self.weights_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "text_template" => self.text_template = (!v.is_empty()).then(|| v.to_string()),
            "parser" => self.parser = v.to_string(),
            k => match k.strip_prefix("mock.text.") {
                Some(phrase) if !phrase.trim().is_empty() => {
                    self.mock_text_vectors
                        .insert(crate::text::normalize(phrase), parse_list(key, v)?);
                }
                _ => return Err(Error::config(format!("unknown configuration key '{k}'"))),
            },
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
            if let Some(prev) = seen.insert(k.trim().to_string(), i + 1) {
                return Err(Error::config(format!("line {}: '{}' already set on line {prev}", i + 1, k.trim())));
            }
            self.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        crate::text::parser_from_name(&self.parser)?;
        Ok(())
    }

    pub fn backend_options(&self) -> BackendOptions {
        BackendOptions {
            weights_dir: self.weights_dir.clone(),
            text_template: self.text_template.clone(),
            mock_text_vectors: self.mock_text_vectors.clone(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("configuration serialises");
        hex::encode(Sha256::digest(json))
    }

    /// The configuration as a file that reproduces it.
    pub fn to_file_string(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("total_iters", t.total_iters.to_string());
        line("early_iters", t.early_iters.to_string());
        line("lr", t.lr.to_string());
        line("lr_halve_at", t.lr_halve_at.to_string());
        line("optimizer", t.optimizer.clone());
        line("beta1", t.beta1.to_string());
        line("beta2", t.beta2.to_string());
        line("eps", t.eps.to_string());
        line("seed", t.seed.to_string());
        line("resolution", t.resolution.to_string());
        line("lambda_dir", t.weights.lambda_dir.to_string());
        line("lambda_con", t.weights.lambda_con.to_string());
        line("lambda_abp", t.weights.lambda_abp.to_string());
        line("lambda_c", t.weights.lambda_c.to_string());
        line("lambda_tv", t.weights.lambda_tv.to_string());
        line("tmps.m", show(&t.tmps.m));
        line("tmps.hard_floor", t.tmps.hard_floor.to_string());
        line("prs.grid_side", t.prs.grid_side.to_string());
        line("prs.patch_sizes", t.prs.patch_sizes.map_or_else(|| "auto".into(), |s| join(&s)));
        line("prs.tau", t.prs.tau.to_string());
        line("patch_size", show(&t.patch_size));
        line("base_patch_count", t.base_patch_count.to_string());
        line("n_aug", t.n_aug.to_string());
        line("distortion", t.distortion.to_string());
        line("content_layers", t.content_layers.as_ref().map_or_else(|| "auto".into(), |l| l.join(",")));
        line(
            "out_patch_mode",
            match t.out_patch_mode {
                OutPatchMode::Paired => "paired".into(),
                OutPatchMode::Tmps => "tmps".into(),
            },
        );
        line("joint_backend", self.joint_backend.clone());
        line("perceptual_backend", self.perceptual_backend.clone());
        line("parser", self.parser.clone());
        line(
            "weights_dir",
            self.weights_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        line("text_template", self.text_template.clone().unwrap_or_default());
        for (k, v) in &self.mock_text_vectors {
            line(&format!("mock.text.{k}"), join(v));
        }
        out
    }
}
