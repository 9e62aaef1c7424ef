use std::path::PathBuf;

use clap::Args;
use objstyle::backends::{default_weights_dir, load_joint, load_perceptual};
use objstyle::config::RunConfig;
use objstyle::metrics::{evaluate_batch, load_batch, load_manifest, Dists, MetricBackends};

use crate::{exit, CmdResult, ConfigArgs, Failure};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// JSON list of {source, stylized, mask, target_text} entries.
    #[arg(long)]
    pub triples: PathBuf,
    #[arg(long, default_value = "objstyle-eval")]
    pub output: PathBuf,
    /// Rows evaluated in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(a: &EvaluateArgs) -> CmdResult {
    let cfg = a.config.build(RunConfig::default())?;
    let entries = load_manifest(&a.triples)
        .map_err(|e| Failure::new(exit::DATA, format!("malformed manifest {}: {e}", a.triples.display())))?;
    let opts = cfg.backend_options();
    let joint = load_joint(&cfg.joint_backend, &opts)?;
    let perceptual = load_perceptual(&cfg.perceptual_backend, &opts)?;
    let dists_path = cfg.weights_dir.clone().unwrap_or_else(default_weights_dir).join(Dists::FILE_NAME);
    let dists = if dists_path.is_file() {
        Some(Dists::load(&dists_path)?)
    } else {
        log::warn!("DISTS weights not found at {}; dists_b is skipped", dists_path.display());
        None
    };
    let backends = MetricBackends::new(joint.as_ref(), perceptual.as_ref(), dists.as_ref());
    let base = a.triples.parent().map(PathBuf::from).unwrap_or_default();
    let report = evaluate_batch(load_batch(&entries, &base), &backends, a.jobs.max(1))?;

    std::fs::create_dir_all(&a.output).map_err(|e| Failure::new(exit::FAILURE, format!("cannot create {}: {e}", a.output.display())))?;
    report.write_csv(&a.output.join("metrics.csv"))?;
    report.write_json(&a.output.join("metrics.json"))?;
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: row {}: {}", r.id, r.error.as_deref().unwrap_or_default());
    }
    let agg = &report.aggregate;
    println!("{} of {} rows evaluated -> {}", agg.valid_rows, agg.total_rows, a.output.display());
    for (k, v) in &agg.means {
        println!("  {k:8} {v:.4}");
    }
    Ok(())
}
