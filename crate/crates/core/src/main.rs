use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seerlab::cli::{cmd_detect, cmd_mount, cmd_threshold, cmd_train, ExperimentConfig};
use seerlab::Error;

/// Gradient-leakage experiments: train and mount the disaggregation attack,
/// audit models client-side, and pick selection thresholds.
#[derive(Parser)]
#[command(name = "seerlab", version)]
struct Cli {
    /// Experiment config (JSON). Defaults apply to every omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Replaces `output_dir`; relative paths resolve under $SEERLAB_OUTPUT_ROOT.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Replace existing outputs instead of failing.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the attack and save the artifact to <output>/train.
    Train,
    /// Mount a trained artifact on simulated rounds; writes <output>/mount.
    Mount {
        /// Artifact directory; defaults to <output>/train.
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
    /// Audit sampled batches with D-SNR and T-SNR; writes <output>/detect.
    Detect {
        /// Checkpoint stem to audit instead of the configured model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Optimize the property threshold; writes <output>/threshold.
    Threshold,
}

fn run(cli: Cli) -> seerlab::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(dir) = &cli.output_dir {
        overrides.push(format!(
            "output_dir={}",
            serde_json::Value::String(dir.display().to_string())
        ));
    }
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, &overrides)?,
        None => ExperimentConfig::from_json("{}", &overrides)?,
    };
    log::info!("config hash {}", cfg.hash());
    match cli.command {
        Command::Train => {
            let dir = cmd_train(&cfg, cli.overwrite)?;
            println!("artifact written to {}", dir.display());
        }
        Command::Mount { artifact } => {
            let artifact = artifact.unwrap_or_else(|| cfg.output_root().join("train"));
            let r = cmd_mount(&cfg, &artifact, cli.overwrite)?;
            let s = &r.summary;
            println!(
                "rec {:.4} (scored-only {:.4})  psnr-all {:.2} +- {:.2}  psnr-top {:.2} +- {:.2}  und-rec {:.4}",
                s.rec_rate, s.rec_rate_scored, s.psnr_all_mean, s.psnr_all_std, s.psnr_top_mean, s.psnr_top_std, s.und_rec_rate
            );
        }
        Command::Detect { model } => {
            let reports = cmd_detect(&cfg, model.as_deref(), cli.overwrite)?;
            let flagged = reports.iter().filter(|r| r.flagged()).count();
            println!("{flagged} of {} batches flagged", reports.len());
        }
        Command::Threshold => {
            let r = cmd_threshold(&cfg, cli.overwrite)?;
            println!("tau {} p {} global_tau {}", r.tau, r.p, r.global_tau);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let field = match &e {
                Error::Config { field, .. } => Some(field.as_str()),
                _ => None,
            };
            let msg =
                serde_json::json!({ "status": "error", "field": field, "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(if field.is_some() { 2 } else { 1 })
        }
    }
}
