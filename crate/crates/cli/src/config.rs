//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use kronquant::{default_candidates, BlockInit, PipelineConfig, RangeMode, DEFAULT_DAMPING};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// CSV destination; `--out` overrides it.
    pub out: Option<PathBuf>,

    pub d: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub blocks: usize,
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    pub qk_gain: f64,
    pub out_gain: f64,

    pub bits: u32,
    pub block_size: usize,
    pub alpha: f64,
    pub cd_iters: usize,
    pub damping: f64,
    pub candidates: Vec<f64>,
    pub range_mode: RangeMode,
    pub residual: bool,
    pub grid_refine: bool,
    pub value_attention_from_quantized: bool,

    pub n_list: Vec<usize>,
    pub cd_list: Vec<usize>,
    /// Block-loop timings keep the fastest of this many runs.
    pub timing_repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let init = BlockInit::default();
        Self {
            seeds: (0..20).collect(),
            out: None,
            d: 32,
            head_dim: 16,
            heads: 2,
            seq_len: 64,
            blocks: 2,
            outlier_channels: 2,
            outlier_gain: 8.0,
            qk_gain: init.qk_gain,
            out_gain: init.out_gain,
            bits: 2,
            block_size: 4,
            alpha: 0.25,
            cd_iters: 1,
            damping: DEFAULT_DAMPING,
            candidates: default_candidates(),
            range_mode: RangeMode::SignedSymmetric,
            residual: true,
            grid_refine: true,
            value_attention_from_quantized: false,
            n_list: vec![1, 4, 8, 16],
            cd_list: vec![0, 1, 2],
            timing_repeats: 3,
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("{key}: bad list entry {s:?}: {e}")))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| anyhow!("{key}: bad value {value:?}: {e}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).with_context(|| format!("line {}", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seeds" => self.seeds = parse_list(key, value)?,
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            "d" => self.d = parse_one(key, value)?,
            "head_dim" => self.head_dim = parse_one(key, value)?,
            "heads" => self.heads = parse_one(key, value)?,
            "seq_len" => self.seq_len = parse_one(key, value)?,
            "blocks" => self.blocks = parse_one(key, value)?,
            "outlier_channels" => self.outlier_channels = parse_one(key, value)?,
            "outlier_gain" => self.outlier_gain = parse_one(key, value)?,
            "qk_gain" => self.qk_gain = parse_one(key, value)?,
            "out_gain" => self.out_gain = parse_one(key, value)?,
            "bits" => self.bits = parse_one(key, value)?,
            "block_size" => self.block_size = parse_one(key, value)?,
            "alpha" => self.alpha = parse_one(key, value)?,
            "cd_iters" => self.cd_iters = parse_one(key, value)?,
            "damping" => self.damping = parse_one(key, value)?,
            "candidates" => self.candidates = parse_list(key, value)?,
            "range_mode" => self.range_mode = parse_one(key, value)?,
            "residual" => self.residual = parse_one(key, value)?,
            "grid_refine" => self.grid_refine = parse_one(key, value)?,
            "value_attention_from_quantized" => self.value_attention_from_quantized = parse_one(key, value)?,
            "n_list" => self.n_list = parse_list(key, value)?,
            "cd_list" => self.cd_list = parse_list(key, value)?,
            "timing_repeats" => self.timing_repeats = parse_one(key, value)?,
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seeds", join(&self.seeds));
        kv("out", self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("d", self.d.to_string());
        kv("head_dim", self.head_dim.to_string());
        kv("heads", self.heads.to_string());
        kv("seq_len", self.seq_len.to_string());
        kv("blocks", self.blocks.to_string());
        kv("outlier_channels", self.outlier_channels.to_string());
        kv("outlier_gain", self.outlier_gain.to_string());
        kv("qk_gain", self.qk_gain.to_string());
        kv("out_gain", self.out_gain.to_string());
        kv("bits", self.bits.to_string());
        kv("block_size", self.block_size.to_string());
        kv("alpha", self.alpha.to_string());
        kv("cd_iters", self.cd_iters.to_string());
        kv("damping", self.damping.to_string());
        kv("candidates", join(&self.candidates));
        kv("range_mode", self.range_mode.as_str().to_string());
        kv("residual", self.residual.to_string());
        kv("grid_refine", self.grid_refine.to_string());
        kv("value_attention_from_quantized", self.value_attention_from_quantized.to_string());
        kv("n_list", join(&self.n_list));
        kv("cd_list", join(&self.cd_list));
        kv("timing_repeats", self.timing_repeats.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list must be nonempty");
        }
        if self.d == 0 || self.head_dim == 0 || self.heads == 0 || self.seq_len == 0 || self.blocks == 0 {
            bail!("model dimensions must be positive");
        }
        if self.outlier_channels > self.d {
            bail!("outlier_channels exceeds d");
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            bail!("n_list must be nonempty with entries >= 1");
        }
        if self.cd_list.is_empty() {
            bail!("cd_list must be nonempty");
        }
        if self.timing_repeats == 0 {
            bail!("timing_repeats must be at least 1");
        }
        self.pipeline().validate().map_err(|e| anyhow!("{e}"))
    }

    pub fn pipeline(&self) -> PipelineConfig<f64> {
        PipelineConfig {
            bits: self.bits,
            block_size: self.block_size,
            alpha: self.alpha,
            cd_iters: self.cd_iters,
            damping: self.damping,
            candidates: self.candidates.clone(),
            range_mode: self.range_mode,
            residual: self.residual,
            grid_refine: self.grid_refine,
            value_attention_from_quantized: self.value_attention_from_quantized,
        }
    }

    pub fn block_init(&self) -> BlockInit {
        BlockInit {
            qk_gain: self.qk_gain,
            out_gain: self.out_gain,
        }
    }
}
