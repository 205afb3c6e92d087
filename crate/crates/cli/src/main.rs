use std::path::PathBuf;
use std::process::ExitCode;

use avae_cli::commands;
use avae_cli::config::ExperimentConfig;
use avae_cli::CliError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avae", version, about = "Train and evaluate autoencoders with delusion-based consistency terms")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (JSON, or `key = value` lines with `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long)]
    overwrite: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.set)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.overwrite |= self.overwrite;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Probe accuracy under attack, drift and reconstruction error.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint; writes per-task differences against the first.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Exact tabular VAE and AVAE on the circle, with transition heatmaps.
    DiscreteDemo(Common),
    /// Closed-form pPCA identities over random models.
    PpcaChecks {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Distance trace of the mean map chain.
    Drift {
        #[command(flatten)]
        common: Common,
        /// Checkpoint; without one the perturbed pPCA map is traced.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        delta_scale: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train(c) => {
            let out = commands::run_train(&c.resolve()?)?;
            let last = out.metrics.last().map_or(f64::NAN, |m| m.loss);
            println!("trained {} steps, final loss {last:.6}, wrote {}", out.metrics.len(), out.dir.display());
        }
        Cmd::Eval { common, checkpoint, compare } => {
            let cfg = common.resolve()?;
            match compare {
                Some(other) => {
                    for d in commands::run_compare(&checkpoint, &other, &cfg)? {
                        println!("{}: nominal {:+.4} adversarial {:?}", d.task, d.nominal_delta, d.adversarial_delta);
                    }
                }
                None => {
                    let s = commands::run_eval(&checkpoint, &cfg)?;
                    print!("{}", s.report.to_csv());
                    println!("reconstruction_mse {:.6}", s.reconstruction_mse);
                }
            }
        }
        Cmd::DiscreteDemo(c) => {
            let s = commands::run_discrete_demo(&c.resolve()?)?;
            println!("diagonal mass: vae {:.4} avae {:.4}", s.diag_mass_vae, s.diag_mass_avae);
        }
        Cmd::PpcaChecks { common, seeds } => {
            let r = commands::run_ppca_checks(&common.resolve()?, seeds)?;
            println!("max residual {:.3e}, drift grows {}", r.max_residual, r.drift_demo.grows);
            if !r.pass {
                return Err(CliError::Core(avae_core::Error::Numeric(format!(
                    "identity residual {:.3e} above {:.0e}",
                    r.max_residual, r.tolerance
                ))));
            }
        }
        Cmd::Drift {
            common,
            checkpoint,
            delta_scale,
            steps,
        } => {
            let p = commands::run_drift(&common.resolve()?, checkpoint.as_deref(), delta_scale, steps)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
