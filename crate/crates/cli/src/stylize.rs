use std::path::{Path, PathBuf};

use clap::Args;
use objstyle::backends::{load_joint, load_perceptual, BackendDescriptor};
use objstyle::config::RunConfig;
use objstyle::text::parser_from_name;
use objstyle::trainer::{save_report, stylize, train_scene, SceneJob, TrainBackends, TrainOptions};
use objstyle::Image;
use serde::{Deserialize, Serialize};

use crate::{exit, CmdResult, ConfigArgs, Failure};

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[arg(long, required_unless_present = "from_manifest")]
    pub source_image: Option<PathBuf>,
    /// Phrase naming the object to restyle, e.g. "red apple".
    #[arg(long, required_unless_present = "from_manifest")]
    pub source_text: Option<String>,
    /// Desired appearance, e.g. "golden".
    #[arg(long, required_unless_present = "from_manifest")]
    pub style_text: Option<String>,
    #[arg(long, default_value = "objstyle-out")]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Re-run the job recorded in a previous run_manifest.json.
    #[arg(long, conflicts_with_all = ["source_image", "source_text", "style_text", "config"])]
    pub from_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    pub source_image: PathBuf,
    pub source_text: String,
    pub style_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub stylized: PathBuf,
    pub mask: PathBuf,
    pub report: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
}

impl Outputs {
    fn in_dir(dir: &Path) -> Self {
        Self {
            stylized: dir.join("stylized.png"),
            mask: dir.join("mask.png"),
            report: dir.join("report.json"),
            checkpoint: dir.join("checkpoint.safetensors"),
            train_log: dir.join("train_log.jsonl"),
        }
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub inputs: Inputs,
    pub outputs: Outputs,
    pub config: RunConfig,
    pub config_hash: String,
    pub joint_backend: BackendDescriptor,
    pub perceptual_backend: BackendDescriptor,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

fn load_manifest(path: &Path) -> Result<RunManifest, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(exit::DATA, format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(exit::DATA, format!("malformed run manifest {}: {e}", path.display())))
}

pub fn run(a: &StylizeArgs) -> CmdResult {
    let (inputs, base) = match &a.from_manifest {
        Some(p) => {
            let m = load_manifest(p)?;
            (m.inputs, m.config)
        }
        None => (
            Inputs {
                source_image: a.source_image.clone().expect("required by clap"),
                source_text: a.source_text.clone().expect("required by clap"),
                style_text: a.style_text.clone().expect("required by clap"),
            },
            RunConfig::default(),
        ),
    };
    let mut cfg = a.config.build(base)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;

    let img = Image::load(&inputs.source_image)?;
    let r = cfg.train.resolution;
    if (img.height(), img.width()) != (r, r) {
        log::info!("resizing {}x{} input to {r}x{r}", img.height(), img.width());
    }
    let img = img.resized(r, r);

    let opts = cfg.backend_options();
    let joint = load_joint(&cfg.joint_backend, &opts)?;
    let perceptual = load_perceptual(&cfg.perceptual_backend, &opts)?;
    let parser = parser_from_name(&cfg.parser)?;

    std::fs::create_dir_all(&a.output).map_err(|e| Failure::new(exit::FAILURE, format!("cannot create {}: {e}", a.output.display())))?;
    let outputs = Outputs::in_dir(&a.output);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: inputs.clone(),
        outputs: outputs.clone(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        joint_backend: joint.descriptor().clone(),
        perceptual_backend: perceptual.descriptor().clone(),
    };
    let write = |p: &Path, bytes: Vec<u8>| {
        std::fs::write(p, bytes).map_err(|e| Failure::new(exit::FAILURE, format!("cannot write {}: {e}", p.display())))
    };
    write(
        &a.output.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest).expect("manifest serialises"),
    )?;

    let job = SceneJob {
        source_image: img,
        source_text: inputs.source_text,
        style_text: inputs.style_text,
        config: cfg.train.clone(),
    };
    let backends = TrainBackends {
        joint: joint.as_ref(),
        perceptual: perceptual.as_ref(),
        parser: parser.as_ref(),
    };
    let options = TrainOptions {
        log_path: Some(outputs.train_log.clone()),
        checkpoint_path: Some(outputs.checkpoint.clone()),
    };
    let (state, report) = train_scene(&job, &backends, &options)?;
    stylize(&state, &job.source_image)?.save_png(&outputs.stylized)?;
    if let Some(m) = &report.foreground_mask {
        m.save_png(&outputs.mask)?;
    }
    save_report(&report, &outputs.report)?;
    println!(
        "stylized '{}' as '{}' in {:.1} s -> {}",
        report.texts.source,
        report.texts.target,
        report.wall_seconds,
        outputs.stylized.display()
    );
    Ok(())
}
