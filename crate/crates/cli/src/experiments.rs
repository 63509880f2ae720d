//! Toy-model experiments behind the `ablate-*` and `pipeline` subcommands.

use std::time::Duration;

use anyhow::Result;
use kronquant::{
    forward_attention, gen_calibration, quantize_attention, quantize_stack, AttnBlock, CalibrationBundle, Matrix, PipelineConfig,
    StackReport,
};

use crate::config::ExperimentConfig;
use crate::csv::Table;

/// Attention blocks and calibration input for one seed.
pub struct Toy {
    pub blocks: Vec<AttnBlock<f64>>,
    pub x0: Matrix<f64>,
}

pub fn build_toy(cfg: &ExperimentConfig, seed: u64) -> Result<Toy> {
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let blocks = (0..cfg.blocks)
        .map(|i| AttnBlock::random(base.wrapping_add(i as u64 + 1), cfg.d, cfg.head_dim, cfg.heads, cfg.block_init()))
        .collect();
    let x0 = gen_calibration(base, cfg.d, cfg.seq_len, cfg.outlier_channels, cfg.outlier_gain)?;
    Ok(Toy { blocks, x0 })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateNRow {
    pub seed: u64,
    pub n: usize,
    /// Sequential steps of one head's layer: `⌈d_h/N⌉`.
    pub steps: usize,
    pub time_ms: f64,
    pub loss_layer: f64,
    pub loss_attn: f64,
}

/// Quantizes the first block at each `N`; timing keeps the fastest repeat.
pub fn ablate_n(cfg: &ExperimentConfig) -> Result<Vec<AblateNRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let toy = build_toy(cfg, seed)?;
        let (ctx, _) = forward_attention(&toy.blocks[0], &toy.x0)?;
        let bundle = CalibrationBundle::clean(toy.x0.clone(), cfg.alpha)?;
        for &n in &cfg.n_list {
            let pcfg = PipelineConfig { block_size: n, ..cfg.pipeline() };
            let mut best: Option<Duration> = None;
            let mut last = None;
            for _ in 0..cfg.timing_repeats {
                let (_, report) = quantize_attention(&toy.blocks[0], &ctx, &bundle, &pcfg)?;
                let t = report.wall_time();
                best = Some(best.map_or(t, |b| b.min(t)));
                last = Some(report);
            }
            let report = last.expect("at least one repeat");
            rows.push(AblateNRow {
                seed,
                n,
                steps: report.layers[0].report.sequential_steps,
                time_ms: ms(best.expect("at least one repeat")),
                loss_layer: report.loss_layer(),
                loss_attn: report.loss_attn(),
            });
        }
    }
    rows.sort_by_key(|r| (r.seed, r.n));
    Ok(rows)
}

pub fn ablate_n_table(rows: &[AblateNRow]) -> Table {
    let mut t = Table::new(&["seed", "n", "steps", "time_ms", "loss_layer", "loss_attn"], &["time_ms"]);
    for r in rows {
        t.push(vec![
            r.seed.to_string(),
            r.n.to_string(),
            r.steps.to_string(),
            format!("{:.3}", r.time_ms),
            fmt_f(r.loss_layer),
            fmt_f(r.loss_attn),
        ]);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Flags {
    Base,
    F2,
    F3,
    F2F3,
}

impl Flags {
    pub const ALL: [Flags; 4] = [Flags::Base, Flags::F2, Flags::F3, Flags::F2F3];

    pub fn as_str(self) -> &'static str {
        match self {
            Flags::Base => "base",
            Flags::F2 => "f2",
            Flags::F3 => "f3",
            Flags::F2F3 => "f2f3",
        }
    }

    /// `(residual, grid_refine)`.
    pub fn switches(self) -> (bool, bool) {
        match self {
            Flags::Base => (false, false),
            Flags::F2 => (true, false),
            Flags::F3 => (false, true),
            Flags::F2F3 => (true, true),
        }
    }

    pub fn apply(self, cfg: &PipelineConfig<f64>) -> PipelineConfig<f64> {
        let (residual, grid_refine) = self.switches();
        PipelineConfig {
            residual,
            grid_refine,
            ..cfg.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub seed: u64,
    pub flags: Flags,
    pub loss_layer: f64,
    pub loss_attn: f64,
    pub deviation: f64,
}

fn stack_losses(report: &StackReport<f64>) -> (f64, f64) {
    let layer = report.blocks.iter().map(|b| b.loss_layer()).sum();
    let attn = report.blocks.iter().map(|b| b.loss_attn()).sum();
    (layer, attn)
}

/// Quantizes the whole stack under each flag combination. Losses are summed
/// over every projection of every block.
pub fn ablate_features(cfg: &ExperimentConfig) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let toy = build_toy(cfg, seed)?;
        for flags in Flags::ALL {
            let report = quantize_stack(&toy.blocks, &toy.x0, &flags.apply(&cfg.pipeline()))?;
            let (loss_layer, loss_attn) = stack_losses(&report);
            rows.push(FeatureRow {
                seed,
                flags,
                loss_layer,
                loss_attn,
                deviation: report.deviation,
            });
        }
    }
    rows.sort_by_key(|r| (r.seed, r.flags));
    Ok(rows)
}

pub fn ablate_features_table(rows: &[FeatureRow]) -> Table {
    let mut t = Table::new(&["seed", "flags", "loss_layer", "loss_attn", "deviation"], &[]);
    for r in rows {
        t.push(vec![
            r.seed.to_string(),
            r.flags.as_str().to_string(),
            fmt_f(r.loss_layer),
            fmt_f(r.loss_attn),
            fmt_f(r.deviation),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdRow {
    pub seed: u64,
    pub n_iter: usize,
    pub loss_attn: f64,
    /// Same run before refinement.
    pub loss_attn_pre: f64,
}

/// Quantizes the first block with residual and grid features on, sweeping the
/// number of coordinate-descent iterations.
pub fn ablate_cd(cfg: &ExperimentConfig) -> Result<Vec<CdRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let toy = build_toy(cfg, seed)?;
        let (ctx, _) = forward_attention(&toy.blocks[0], &toy.x0)?;
        let bundle = CalibrationBundle::clean(toy.x0.clone(), cfg.alpha)?;
        for &n_iter in &cfg.cd_list {
            let pcfg = PipelineConfig {
                cd_iters: n_iter,
                ..Flags::F2F3.apply(&cfg.pipeline())
            };
            let (_, report) = quantize_attention(&toy.blocks[0], &ctx, &bundle, &pcfg)?;
            rows.push(CdRow {
                seed,
                n_iter,
                loss_attn: report.loss_attn(),
                loss_attn_pre: report.loss_attn_pre(),
            });
        }
    }
    rows.sort_by_key(|r| (r.seed, r.n_iter));
    Ok(rows)
}

pub fn ablate_cd_table(rows: &[CdRow]) -> Table {
    let mut t = Table::new(&["seed", "n_iter", "loss_attn"], &[]);
    for r in rows {
        t.push(vec![r.seed.to_string(), r.n_iter.to_string(), fmt_f(r.loss_attn)]);
    }
    t
}

/// Full-stack run with the configured features: one row per projection and head.
pub fn pipeline_table(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = Table::new(
        &[
            "seed",
            "block",
            "layer",
            "head",
            "steps",
            "time_ms",
            "loss_layer_pre",
            "loss_attn_pre",
            "loss_layer",
            "loss_attn",
            "deviation",
        ],
        &["time_ms"],
    );
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    for seed in seeds {
        let toy = build_toy(cfg, seed)?;
        let report = quantize_stack(&toy.blocks, &toy.x0, &cfg.pipeline())?;
        for (b, block) in report.blocks.iter().enumerate() {
            for l in &block.layers {
                let r = &l.report;
                t.push(vec![
                    seed.to_string(),
                    b.to_string(),
                    l.kind.to_string(),
                    l.head.to_string(),
                    r.sequential_steps.to_string(),
                    format!("{:.3}", ms(r.wall_time)),
                    fmt_f(r.loss_layer_pre),
                    fmt_f(r.loss_attn_pre),
                    fmt_f(r.loss_layer),
                    fmt_f(r.loss_attn),
                    fmt_f(report.deviation),
                ]);
            }
        }
    }
    Ok(t)
}

/// Shortest round-trip scientific notation.
pub fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}
