//! Experiment harness around `kronquant`: configuration files, oracle
//! validation, ablation sweeps and CSV reports.

pub mod config;
pub mod csv;
pub mod experiments;
pub mod validate;

use std::path::PathBuf;

use anyhow::{bail, Result};

pub use config::ExperimentConfig;

/// Output path from `--out`, falling back to the config's `out` key.
pub fn resolve_out(cli_out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    match cli_out.or_else(|| cfg.out.clone()) {
        Some(p) => Ok(p),
        None => bail!("no output path: pass --out or set `out` in the config"),
    }
}

/// Runs one reporting subcommand and returns the rendered CSV.
pub fn run_report(command: &str, cfg: &ExperimentConfig) -> Result<String> {
    let table = match command {
        "ablate-n" => experiments::ablate_n_table(&experiments::ablate_n(cfg)?),
        "ablate-features" => experiments::ablate_features_table(&experiments::ablate_features(cfg)?),
        "ablate-cd" => experiments::ablate_cd_table(&experiments::ablate_cd(cfg)?),
        "pipeline" => experiments::pipeline_table(cfg)?,
        other => bail!("unknown report command {other:?}"),
    };
    Ok(csv::render(&table, cfg, command))
}
