use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use espo_cli::checks::CheckScale;
use espo_cli::commands::{cmd_ablate, cmd_eval, cmd_flops, cmd_oracle_check, cmd_train};
use espo_cli::{Axis, ExperimentSpec};
use espo_core::nn::checkpoint::write_atomic;

#[derive(Parser)]
#[command(
    name = "espo",
    version,
    about = "Sequence-level policy optimization for masked diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed listed in the experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint with the evaluation sampler.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of generated instances.
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// JSON-lines instance file to use instead of generated instances.
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis over every seed and chart the rewards.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training FLOPs per sample in units of N D.
    Flops {
        #[arg(long, default_value_t = 256)]
        k: u64,
        #[arg(long, default_value_t = 8)]
        mu: u64,
        #[arg(long, default_value_t = 2)]
        m: u64,
        /// Independent masks instead of coupled pairs.
        #[arg(long)]
        naive: bool,
        /// Parameter count, for an absolute figure.
        #[arg(long, requires = "d")]
        n: Option<u64>,
        /// Sequence length, for an absolute figure.
        #[arg(long, requires = "n")]
        d: Option<u64>,
    },
    /// Check the estimators against exact oracles on random tiny models.
    OracleCheck {
        /// Completion length; random up to 4 when omitted.
        #[arg(long)]
        len: Option<usize>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 4000)]
        draws: usize,
        #[arg(long, default_value_t = 2000)]
        replications: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_spec(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(config)?;
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    if let Some(o) = out {
        spec.out_dir = o;
    }
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let spec = load_spec(&config, seed, out)?;
            cmd_train(&spec)?;
        }
        Command::Eval {
            config,
            checkpoint,
            n,
            instances,
            seed,
            out,
        } => {
            let spec = ExperimentSpec::load(&config)?;
            let report = cmd_eval(&spec.run, &checkpoint, n, instances.as_deref(), seed)?;
            match report.accuracy {
                Some(a) => println!("accuracy {a:.4} over {} instances", report.outcomes.len()),
                None => println!("accuracy n/a (no instances)"),
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_atomic(&dir.join("eval.json"), &serde_json::to_vec_pretty(&report)?)?;
            }
        }
        Command::Ablate {
            config,
            axis,
            seed,
            out,
        } => {
            let spec = load_spec(&config, seed, out)?;
            let s = cmd_ablate(&spec, axis)?;
            println!("wrote {} and {}", s.csv.display(), s.svg.display());
            if !s.failures.is_empty() {
                eprintln!("{} arm(s) failed", s.failures.len());
                return Ok(false);
            }
        }
        Command::Flops { k, mu, m, naive, n, d } => {
            print!("{}", cmd_flops(k, mu, m, !naive, n.zip(d))?);
        }
        Command::OracleCheck {
            len,
            instances,
            draws,
            replications,
            seed,
            out,
        } => {
            let scale = CheckScale {
                instances,
                len,
                max_len: len.unwrap_or(4),
                draws,
                replications,
                seed,
            };
            let summary = cmd_oracle_check(&scale)?;
            for p in &summary.properties {
                eprintln!("{}", p.line());
            }
            let json = serde_json::to_string_pretty(&summary)?;
            println!("{json}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_atomic(&dir.join("oracle_check.json"), json.as_bytes()).context("writing oracle summary")?;
            }
            return Ok(summary.all_ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
