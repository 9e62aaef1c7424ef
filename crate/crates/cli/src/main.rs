use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objstyle::config::RunConfig;
use objstyle::Error;

mod evaluate;
mod grid;
mod ground;
mod stylize;

/// Exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const NOT_GROUNDED: u8 = 2;
    pub const BACKEND: u8 = 3;
    pub const USAGE: u8 = 64;
    pub const DATA: u8 = 65;
}

/// Text-driven object-centric style transfer.
#[derive(Parser, Debug)]
#[command(name = "objstyle", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on one image and restyle the object named by the source text.
    Stylize(stylize::StylizeArgs),
    /// Locate the region named by a text and write its mask.
    Ground(ground::GroundArgs),
    /// Score stylized images against ground-truth masks.
    Evaluate(evaluate::EvaluateArgs),
    /// Tile captioned images into one PNG.
    Grid(grid::GridArgs),
}

/// Options shared by commands that build a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set prs.tau=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Image-text backend: clip-vit-b32 or mock.
    #[arg(long)]
    pub joint_backend: Option<String>,
    /// Perceptual backend: vgg19 or mock.
    #[arg(long)]
    pub perceptual_backend: Option<String>,
    /// Directory holding pretrained weights.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
}

impl ConfigArgs {
    /// Defaults, then the file, then flags.
    pub fn build(&self, base: RunConfig) -> Result<RunConfig, Error> {
        let mut cfg = base;
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        if let Some(b) = &self.joint_backend {
            cfg.joint_backend = b.clone();
        }
        if let Some(b) = &self.perceptual_backend {
            cfg.perceptual_backend = b.clone();
        }
        if let Some(d) = &self.weights_dir {
            cfg.weights_dir = Some(d.clone());
        }
        Ok(cfg)
    }
}

/// Failure carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::GroundingFailure { .. } => exit::NOT_GROUNDED,
            Error::Backend(_) => exit::BACKEND,
            Error::Configuration(_) => exit::USAGE,
            Error::RejectedInput(_) | Error::Shape(_) | Error::Image(_) | Error::Json(_) | Error::DegenerateMask(_) => {
                exit::DATA
            }
            _ => exit::FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let res = match &cli.command {
        Command::Stylize(a) => stylize::run(a),
        Command::Ground(a) => ground::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Grid(a) => grid::run(a),
    };
    match res {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
