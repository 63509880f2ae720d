use std::path::Path;
use std::process::Command;

use kronquant::{BlockIndex, Matrix};
use kronquant_cli::experiments::{ablate_cd, ablate_features, ablate_n, Flags};
use kronquant_cli::validate::{cmd_validate, ValidateOptions};
use kronquant_cli::{run_report, ExperimentConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kronquant"))
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn small() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![2, 0, 1],
        d: 16,
        head_dim: 8,
        seq_len: 24,
        n_list: vec![8, 1, 4],
        ..ExperimentConfig::default()
    }
}

fn flipped(w: &Matrix<f64>, q: &Matrix<f64>, u: &Matrix<f64>, b: BlockIndex) -> kronquant::Result<Matrix<f64>> {
    kronquant::joint_compensate(w, q, u, b).map(|d| d.scale(-1.0))
}

#[test]
fn sign_flip_is_caught_and_dumped() {
    let dir = tempfile::tempdir().unwrap();
    let opts = ValidateOptions {
        seeds: vec![0],
        replay_dir: dir.path().to_path_buf(),
        joint_rule: flipped,
    };
    let mut out = Vec::new();
    assert!(!cmd_validate(&opts, &mut out).unwrap());
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("FAIL joint-compensation"), "{text}");
    assert!(text.contains("PASS residual-compensation"), "{text}");
    let case = dir.path().join("joint-compensation");
    for f in ["case.txt", "h_out.txt", "h_in.txt", "w_block.txt", "q_block.txt"] {
        assert!(case.join(f).exists(), "{f}");
    }
    // One matrix row per line, space-separated decimals.
    let h_out = std::fs::read_to_string(case.join("h_out.txt")).unwrap();
    let rows: Vec<Vec<f64>> = h_out.lines().map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect()).collect();
    assert!(rows.len() >= 4 && rows.iter().all(|r| r.len() == rows.len()));
}

#[test]
fn validate_binary_reduced_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["validate", "--seeds", "1", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "nothing dumped on success");
}

#[test]
fn ablate_n_format_and_steps() {
    let cfg = ExperimentConfig {
        seeds: vec![0],
        d: 32,
        head_dim: 128,
        heads: 1,
        seq_len: 16,
        blocks: 1,
        n_list: vec![16, 1],
        timing_repeats: 1,
        ..ExperimentConfig::default()
    };
    let text = run_report("ablate-n", &cfg).unwrap();
    let lines = data_lines(&text);
    assert_eq!(lines[0], "seed,n,steps,time_ms,loss_layer,loss_attn");
    assert!(lines[1].starts_with("0,1,128,"));
    assert!(lines[2].starts_with("0,16,8,"));
}

#[test]
fn rows_sorted_by_seed_then_sweep() {
    let cfg = small();
    let rows = ablate_n(&cfg).unwrap();
    let keys: Vec<(u64, usize)> = rows.iter().map(|r| (r.seed, r.n)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(keys.len(), 9);
}

#[test]
fn feature_flags_and_lossless_bits() {
    let text = run_report("ablate-features", &small()).unwrap();
    let lines = data_lines(&text);
    assert_eq!(lines[0], "seed,flags,loss_layer,loss_attn,deviation");
    let flags: Vec<&str> = lines[1..5].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(flags, ["base", "f2", "f3", "f2f3"]);

    let coarse = ablate_features(&small()).unwrap();
    let fine = ablate_features(&ExperimentConfig { bits: 24, ..small() }).unwrap();
    for (c, f) in coarse.iter().zip(&fine) {
        assert_eq!((c.seed, c.flags), (f.seed, f.flags));
        assert!(f.loss_attn < 1e-10 * c.loss_attn, "{:?}", f.flags);
        assert!(f.deviation < 1e-10 * c.deviation);
    }
    assert!(Flags::ALL.iter().all(|f| !f.as_str().is_empty()));
}

#[test]
fn cd_sweep_starts_at_pre_refinement_loss() {
    let rows = ablate_cd(&small()).unwrap();
    assert_eq!(rows.len(), 9);
    for r in rows.iter().filter(|r| r.n_iter == 0) {
        assert_eq!(r.loss_attn, r.loss_attn_pre);
    }
    let mean = |n: usize| rows.iter().filter(|r| r.n_iter == n).map(|r| r.loss_attn).sum::<f64>();
    assert!(mean(1) <= mean(0) && mean(2) <= mean(1));
}

fn run_to(cmd: &str, cfg_path: &Path, out: &Path) -> std::process::Output {
    bin().args([cmd, "--config"]).arg(cfg_path).arg("--out").arg(out).output().unwrap()
}

#[test]
fn binary_reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, small().serialize()).unwrap();
    for cmd in ["ablate-n", "ablate-features", "ablate-cd", "pipeline"] {
        let (a, b) = (dir.path().join(format!("{cmd}-a.csv")), dir.path().join(format!("{cmd}-b.csv")));
        assert!(run_to(cmd, &cfg_path, &a).status.success());
        assert!(run_to(cmd, &cfg_path, &b).status.success());
        let strip = |p: &Path| kronquant_cli::csv::strip_nondeterministic(&std::fs::read_to_string(p).unwrap());
        assert_eq!(strip(&a), strip(&b), "{cmd}");
        assert!(std::fs::read_to_string(&a).unwrap().contains("# config_sha256 = "));
    }
}

#[test]
fn seeds_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, small().serialize()).unwrap();
    let out = dir.path().join("cd.csv");
    let status = bin().args(["ablate-cd", "--seeds", "7"]).arg("--config").arg(&cfg_path).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(data_lines(&text)[1..].iter().all(|l| l.starts_with("7,")));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "bits = one\n").unwrap();
    let out = run_to("ablate-cd", &bad, &dir.path().join("x.csv"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bits"));

    let no_out = bin().arg("ablate-cd").output().unwrap();
    assert_eq!(no_out.status.code(), Some(2));

    let cfg_path = dir.path().join("ok.cfg");
    std::fs::write(&cfg_path, small().serialize()).unwrap();
    let unwritable = run_to("ablate-cd", &cfg_path, &dir.path().join("missing/dir/x.csv"));
    assert_eq!(unwritable.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unwritable.stderr).contains("missing/dir/x.csv"));
}
