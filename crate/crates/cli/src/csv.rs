//! Minimal CSV output with a `#`-prefixed metadata header.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    /// Columns holding nondeterministic measurements.
    pub timing_columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str], timing: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            timing_columns: timing.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    /// Header line followed by data lines, no metadata.
    pub fn body(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.serialize().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn render(table: &Table, cfg: &ExperimentConfig, command: &str) -> String {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut s = format!(
        "# kronquant {} {command}\n# config_sha256 = {}\n# timing_columns = {}\n# generated_unix = {ts}\n",
        env!("CARGO_PKG_VERSION"),
        config_hash(cfg),
        table.timing_columns.join(";"),
    );
    s.push_str(&table.body());
    s
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Drops the timestamp line and blanks timing columns so two runs can be
/// compared byte for byte.
pub fn strip_nondeterministic(text: &str) -> String {
    let mut timing: Vec<String> = Vec::new();
    let mut timing_idx: Vec<usize> = Vec::new();
    let mut out = String::new();
    let mut header_seen = false;
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(cols) = meta.trim().strip_prefix("timing_columns = ") {
                timing = cols.split(';').filter(|c| !c.is_empty()).map(str::to_string).collect();
            }
            if !meta.trim().starts_with("generated_unix") {
                out.push_str(line);
                out.push('\n');
            }
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').collect();
        if !header_seen {
            header_seen = true;
            timing_idx = fields.iter().enumerate().filter(|(_, f)| timing.iter().any(|t| t == *f)).map(|(i, _)| i).collect();
        } else {
            for &i in &timing_idx {
                if i < fields.len() {
                    fields[i] = "-";
                }
            }
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_timestamp_and_timing() {
        let mut t = Table::new(&["seed", "time_ms", "loss"], &["time_ms"]);
        t.push(vec!["0".into(), "1.5".into(), "2e0".into()]);
        let cfg = ExperimentConfig::default();
        let a = render(&t, &cfg, "x");
        t.rows[0][1] = "9.0".into();
        let b = render(&t, &cfg, "x");
        assert_ne!(a, b);
        assert_eq!(strip_nondeterministic(&a), strip_nondeterministic(&b));
        assert!(strip_nondeterministic(&a).contains("seed,time_ms,loss\n0,-,2e0\n"));
    }

    #[test]
    fn hash_tracks_config() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { bits: 3, ..a.clone() };
        assert_eq!(config_hash(&a).len(), 64);
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
