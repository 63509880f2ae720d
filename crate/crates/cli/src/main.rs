use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kronquant_cli::validate::{cmd_validate, ValidateOptions};
use kronquant_cli::{csv, resolve_out, run_report, ExperimentConfig};

#[derive(Parser)]
#[command(name = "kronquant", version, about = "Attention-aware low-bit weight quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path (CSV, or replay directory for `validate`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the closed-form rules against brute-force oracles.
    Validate(Common),
    /// Sweep the number of out-channels quantized per step.
    AblateN(Common),
    /// Compare residual and grid features on and off.
    AblateFeatures(Common),
    /// Sweep the number of scale-refinement iterations.
    AblateCd(Common),
    /// Quantize the toy stack with the configured features.
    Pipeline(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let (name, common) = match &cli.command {
        Command::Validate(c) => ("validate", c),
        Command::AblateN(c) => ("ablate-n", c),
        Command::AblateFeatures(c) => ("ablate-features", c),
        Command::AblateCd(c) => ("ablate-cd", c),
        Command::Pipeline(c) => ("pipeline", c),
    };
    if name == "validate" {
        let mut opts = ValidateOptions::default();
        if common.config.is_some() || common.seeds.is_some() {
            opts.seeds = load(common)?.seeds;
        }
        if let Some(dir) = &common.out {
            opts.replay_dir = dir.clone();
        }
        return cmd_validate(&opts, &mut std::io::stdout().lock());
    }
    let cfg = load(common)?;
    let out = resolve_out(common.out.clone(), &cfg)?;
    let text = run_report(name, &cfg).with_context(|| format!("running {name}"))?;
    csv::write(&out, &text)?;
    eprintln!("wrote {}", out.display());
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
