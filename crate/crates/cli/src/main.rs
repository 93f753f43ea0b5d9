use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use varloss::config::{
    DiagnoseConfig, GenerateConfig, MetricConfig, PcaDemoConfig, RunConfig, ScatterConfig, Settings,
    SmoothingDemoConfig, TwoStageConfig, RUN_KEYS,
};
use varloss::datasets::Manifest;
use varloss::experiment;
use varloss::Error;

/// Exit code for configuration and validation errors.
const EXIT_CONFIG: u8 = 2;
/// Exit code for numerical divergence during training.
const EXIT_DIVERGENCE: u8 = 3;
/// Exit code when some scatter-grid cells failed.
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "varloss", version, about = "Variance-loss experiments for autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// key=value config file; overrides on the command line win.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Settings as key=value pairs.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a VAE; writes a checkpoint and per-epoch history.
    Train(ConfigArgs),
    /// Reconstruction report and per-component variance law of a checkpoint.
    Diagnose(ConfigArgs),
    /// Grid of VAEs plus PCA baselines: mse against variance loss.
    Scatter(ConfigArgs),
    /// Two-stage VAE with and without renormalization.
    Twostage(ConfigArgs),
    /// Sample from a saved two-stage model.
    Generate(ConfigArgs),
    /// Fréchet distance between two sample files.
    Metric(ConfigArgs),
    /// PCA projection demo data.
    DemoPca(ConfigArgs),
    /// Moving-average smoothing demo data.
    DemoSmoothing(ConfigArgs),
}

fn load_settings(args: &ConfigArgs) -> anyhow::Result<Manifest> {
    let mut m = match &args.config {
        Some(p) => Manifest::read(p)?,
        None => Manifest::default(),
    };
    for o in &args.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!(Error::InvalidArgument(format!("override `{o}` is not key=value")));
        };
        m.set(k.trim(), v.trim());
    }
    Ok(m)
}

fn save_config(m: &Manifest, dir: &Path) -> anyhow::Result<()> {
    m.write(&dir.join("config.txt"))
        .with_context(|| format!("writing config to {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train(a) => {
            let m = load_settings(&a)?;
            let cfg = RunConfig::from_settings(&Settings::new(&m, RUN_KEYS)?)?;
            let t = experiment::run_train(&cfg)?;
            save_config(&m, &cfg.out_dir)?;
            match t.history.last() {
                Some(h) => println!(
                    "epochs={} mse={} kl={} variance_law={} mu_mean_norm={}",
                    t.history.len(),
                    h.mse,
                    h.kl,
                    h.variance_law,
                    h.mu_mean_norm
                ),
                None => println!("epochs=0 (initial model saved)"),
            }
        }
        Command::Diagnose(a) => {
            let m = load_settings(&a)?;
            let cfg = DiagnoseConfig::from_manifest(&m)?;
            let d = experiment::run_diagnose(&cfg)?;
            save_config(&m, &cfg.out_dir)?;
            let r = &d.row;
            println!(
                "mse={} loss_per_feature={} loss_paper_axis={} variance_law={} ffd={}",
                r.mse.unwrap_or(f64::NAN),
                r.loss_per_feature,
                r.loss_paper_axis,
                r.variance_law,
                r.ffd
            );
        }
        Command::Scatter(a) => {
            let m = load_settings(&a)?;
            let cfg = ScatterConfig::from_manifest(&m)?;
            let rows = experiment::run_scatter(&cfg)?;
            save_config(&m, &cfg.run.out_dir)?;
            let failed: Vec<_> = rows.iter().filter(|r| r.outcome.is_err()).collect();
            match experiment::scatter_correlation(&rows) {
                Ok(r) => println!("cells={} failed={} pearson={r}", rows.len(), failed.len()),
                Err(e) => println!("cells={} failed={} pearson=n/a ({e})", rows.len(), failed.len()),
            }
            if !failed.is_empty() {
                for r in failed {
                    if let Err(e) = &r.outcome {
                        eprintln!("cell {} failed: {e}", r.cell);
                    }
                }
                return Ok(EXIT_PARTIAL);
            }
        }
        Command::Twostage(a) => {
            let m = load_settings(&a)?;
            let cfg = TwoStageConfig::from_manifest(&m)?;
            let out = experiment::run_twostage(&cfg)?;
            save_config(&m, &cfg.run.out_dir)?;
            for r in &out.rows {
                println!("{} {} ffd={} loss_per_feature={}", r.stage, r.renorm, r.ffd, r.loss_per_feature);
            }
        }
        Command::Generate(a) => {
            let m = load_settings(&a)?;
            let cfg = GenerateConfig::from_manifest(&m)?;
            let g = experiment::run_generate(&cfg)?;
            save_config(&m, &cfg.out_dir)?;
            println!("samples={} width={}", g.samples.rows(), g.samples.cols());
        }
        Command::Metric(a) => {
            let m = load_settings(&a)?;
            let cfg = MetricConfig::from_manifest(&m)?;
            let r = experiment::run_metric(&cfg)?;
            if let Some(dir) = &cfg.out_dir {
                save_config(&m, dir)?;
            }
            println!("distance={} n_real={} n_generated={}", r.distance, r.n_real, r.n_generated);
        }
        Command::DemoPca(a) => {
            let m = load_settings(&a)?;
            let cfg = PcaDemoConfig::from_manifest(&m)?;
            let d = experiment::run_pca_demo(&cfg)?;
            save_config(&m, &cfg.out_dir)?;
            println!(
                "mse={} loss_per_feature={} discarded_eigen_sum={}",
                d.theorem.mse, d.theorem.loss_per_feature, d.theorem.discarded_eigen_sum
            );
        }
        Command::DemoSmoothing(a) => {
            let m = load_settings(&a)?;
            let cfg = SmoothingDemoConfig::from_manifest(&m)?;
            let d = experiment::run_smoothing_demo(&cfg)?;
            save_config(&m, &cfg.out_dir)?;
            println!("mse={} variance_loss={} mean_gap={}", d.mse, d.variance_loss, d.mean_gap);
        }
    }
    Ok(0)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::NonFinite(_) | Error::NoConvergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
