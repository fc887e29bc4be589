//! Command-line front end: pretraining, fine-tuning, latent export,
//! sampling, evaluation and the numerical self-check.
//!
//! Exit codes: 0 success, 1 a self-check failed, 2 usage, input or
//! runtime error.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use moldiff::checkpoint::write_atomic;
use moldiff::Execution;

use crate::artifacts::{eval_csv, LATENTS, SAMPLES};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "moldiff",
    version,
    about = "Molecular graph VAE with a diffusion-chain latent posterior"
)]
pub struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the default configuration, or validate a file.
    Config {
        #[arg(long, conflicts_with = "validate")]
        print_default: bool,
        /// Parse and validate this file.
        #[arg(long, value_name = "FILE")]
        validate: Option<PathBuf>,
    },
    /// Train encoder, decoder and denoiser on unlabelled molecules.
    Pretrain {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Continue training with the property-regression loss.
    Finetune {
        #[arg(short, long)]
        config: PathBuf,
        /// Defaults to the pretraining checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export zero-noise z₁ latents as CSV.
    Encode {
        #[arg(short, long)]
        config: PathBuf,
        /// CSV with a `smiles` column.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `latents.csv` in the output directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate molecules through the reverse chain.
    Sample {
        #[arg(short, long)]
        config: PathBuf,
        /// Number of molecules (defaults to `sample.count`).
        #[arg(short)]
        n: Option<usize>,
        /// Defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `samples.csv` in the output directory; `-` prints.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Report train/test MSE of a fine-tuned checkpoint.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the numerical self-checks.
    Check {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Halve one ᾱ entry first, to confirm the checks can fail.
        #[arg(long, hide = true, value_name = "STEP")]
        corrupt_alpha_bar: Option<usize>,
    },
}

/// Runs one command, writing reports to `out`, and returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Config { validate, .. } => {
            match validate {
                Some(path) => {
                    RunConfig::load(&path)?;
                    writeln!(out, "{}: ok", path.display())?;
                }
                None => write!(out, "{}", RunConfig::commented_default())?,
            }
            Ok(0)
        }
        Command::Pretrain { config } => {
            let cfg = RunConfig::load(&config)?;
            let r = commands::pretrain(&cfg, exec)?;
            match r.last {
                Some(last) => writeln!(
                    out,
                    "pretrained {} steps, final elbo {:.4}",
                    r.steps, last.breakdown.elbo
                )?,
                None => writeln!(out, "pretrained 0 steps")?,
            }
            writeln!(out, "artifacts in {}", cfg.output_dir().display())?;
            Ok(0)
        }
        Command::Finetune { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt =
                checkpoint.unwrap_or_else(|| cfg.output_dir().join(artifacts::PRETRAIN_CHECKPOINT));
            let r = commands::finetune(&cfg, &ckpt, exec)?;
            write!(out, "{}", eval_csv(&r.rows))?;
            Ok(0)
        }
        Command::Encode {
            config,
            input,
            checkpoint,
            output,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| commands::default_checkpoint(&cfg));
            let output = output.unwrap_or_else(|| cfg.output_dir().join(LATENTS));
            let (rows, rejects) = commands::encode(&cfg, &ckpt, &input, &output, exec)?;
            writeln!(
                out,
                "wrote {rows} latents to {} ({rejects} rejected)",
                output.display()
            )?;
            Ok(0)
        }
        Command::Sample {
            config,
            n,
            seed,
            checkpoint,
            output,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| commands::default_checkpoint(&cfg));
            let smiles = commands::sample(
                &cfg,
                &ckpt,
                n.unwrap_or(cfg.sample.count),
                seed.unwrap_or(cfg.seed),
                exec,
            )?;
            let text = commands::samples_csv(&smiles);
            match output {
                Some(p) if p.as_os_str() == "-" => write!(out, "{text}")?,
                other => {
                    let path = other.unwrap_or_else(|| cfg.output_dir().join(SAMPLES));
                    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                        std::fs::create_dir_all(dir)?;
                    }
                    write_atomic(&path, text.as_bytes())?;
                    writeln!(
                        out,
                        "wrote {} molecules to {}",
                        smiles.len(),
                        path.display()
                    )?;
                }
            }
            Ok(0)
        }
        Command::Eval { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt =
                checkpoint.unwrap_or_else(|| cfg.output_dir().join(artifacts::FINETUNE_CHECKPOINT));
            write!(out, "{}", eval_csv(&commands::eval(&cfg, &ckpt, exec)?))?;
            Ok(0)
        }
        Command::Check {
            config,
            corrupt_alpha_bar,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let outcomes = commands::check(&cfg, corrupt_alpha_bar)?;
            writeln!(out, "status,check,measured,tolerance")?;
            for c in &outcomes {
                let status = if c.passed { "PASS" } else { "FAIL" };
                writeln!(
                    out,
                    "{status},\"{}\",{:e},{:e}",
                    c.name, c.measured, c.tolerance
                )?;
            }
            let failed: Vec<&str> = outcomes
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.as_str())
                .collect();
            if failed.is_empty() {
                Ok(0)
            } else {
                eprintln!("failed checks: {}", failed.join("; "));
                Ok(1)
            }
        }
    }
}
