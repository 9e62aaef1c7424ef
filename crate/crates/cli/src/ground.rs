use std::path::PathBuf;

use clap::Args;
use objstyle::backends::load_joint;
use objstyle::config::RunConfig;
use objstyle::grounding::{overlay, prs_build_foreground};
use objstyle::Image;

use crate::{exit, CmdResult, ConfigArgs, Failure};

#[derive(Args, Debug)]
pub struct GroundArgs {
    #[arg(long)]
    pub source_image: PathBuf,
    #[arg(long)]
    pub source_text: String,
    #[arg(long, default_value = "objstyle-ground")]
    pub output: PathBuf,
    /// Votes a pixel needs to join the mask.
    #[arg(long)]
    pub tau: Option<u32>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(a: &GroundArgs) -> CmdResult {
    let mut cfg = a.config.build(RunConfig::default())?;
    if let Some(t) = a.tau {
        cfg.train.prs.tau = t;
    }
    cfg.train.prs.validate()?;
    cfg.train.tmps.validate()?;
    let img = Image::load(&a.source_image)?;
    let joint = load_joint(&cfg.joint_backend, &cfg.backend_options())?;
    let out = prs_build_foreground(&img, &a.source_text, joint.as_ref(), &cfg.train.prs, &cfg.train.tmps)?;

    std::fs::create_dir_all(&a.output).map_err(|e| Failure::new(exit::FAILURE, format!("cannot create {}: {e}", a.output.display())))?;
    out.mask.save_png(a.output.join("mask.png"))?;
    overlay(&img, &out.mask, 0.5)?.save_png(a.output.join("overlay.png"))?;
    out.votes.save_png16(a.output.join("votes.png"))?;
    if !out.is_grounded() {
        return Err(objstyle::Error::GroundingFailure {
            text: a.source_text.clone(),
        }
        .into());
    }
    println!(
        "{} of {} candidates selected, {} mask pixels -> {}",
        out.selection.indices.len(),
        out.candidates.len(),
        out.mask.count_ones(),
        a.output.display()
    );
    Ok(())
}
