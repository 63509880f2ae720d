//! Oracle suites comparing the closed-form rules against brute-force solvers.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kronquant::oracle::{dense_inverse, quadratic_fit_min, KktSystem};
use kronquant::{
    build_hessian_key, build_hessian_query, build_hessian_value, chol_inv_upper, dampen, default_candidates, forward_attention,
    gen_calibration, gptaq_quantize, gptq_quantize, init_scales_for_block, joint_compensate, joint_compensate_residual, round_to_grid,
    AttnBlock, BlockIndex, BlockInit, Matrix, QuantGrid, RangeMode, RefineState, ResidualInfo,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Signature of the joint out-channel compensation rule under test.
pub type JointRule = fn(&Matrix<f64>, &Matrix<f64>, &Matrix<f64>, BlockIndex) -> kronquant::Result<Matrix<f64>>;

pub const KKT_TOL: f64 = 1e-8;
pub const FIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub seeds: Vec<u64>,
    /// Where failing cases are dumped; nothing is written on success.
    pub replay_dir: PathBuf,
    pub joint_rule: JointRule,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            replay_dir: PathBuf::from("validate-replay"),
            joint_rule: joint_compensate::<f64>,
        }
    }
}

/// Inputs of a failing case, one matrix per file.
#[derive(Debug, Clone)]
pub struct Replay {
    pub case: String,
    pub matrices: Vec<(&'static str, Matrix<f64>)>,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub failure: Option<Replay>,
}

impl SuiteResult {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            cases: 0,
            max_residual: 0.0,
            tolerance,
            failure: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    fn record(&mut self, residual: f64, replay: impl FnOnce() -> Replay) {
        self.cases += 1;
        // NaN counts as a failure.
        let ok = residual <= self.tolerance;
        self.max_residual = if residual.is_nan() { f64::NAN } else { self.max_residual.max(residual) };
        if !ok && self.failure.is_none() {
            self.failure = Some(replay());
        }
    }
}

fn rel_frobenius(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    match a.sub(b) {
        Ok(d) => d.frobenius() / b.frobenius().max(1e-300),
        Err(_) => f64::INFINITY,
    }
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let b = Matrix::<f64>::random_normal(n, 2 * n, 1.0, rng);
    dampen(&b.gram_rows(), 0.01)
}

struct Instance {
    h_out: Matrix<f64>,
    h_in: Matrix<f64>,
    x: Matrix<f64>,
    w_block: Matrix<f64>,
    q_block: Matrix<f64>,
    block: BlockIndex,
}

/// `d_out ∈ {4,8,16}`, `N ∈ {1,2,4}`, `d_in ∈ {4,8}`, damped random SPD
/// curvature, and a block placed anywhere that leaves rows to compensate.
fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_out = [4, 8, 16][rng.random_range(0..3)];
    let n = [1usize, 2, 4][rng.random_range(0..3)].min(d_out / 2);
    let d_in = [4, 8][rng.random_range(0..2)];
    let start = n * rng.random_range(0..(d_out - 1) / n);
    let h_out = random_spd(d_out, &mut rng);
    let x = Matrix::random_normal(d_in, 3 * d_in, 1.0, &mut rng);
    let h_in = dampen(&x.gram_rows(), 0.01);
    let w_block = Matrix::random_normal(n, d_in, 1.0, &mut rng);
    let q_block = w_block.add(&Matrix::random_normal(n, d_in, 0.1, &mut rng)).expect("same shape");
    Instance {
        h_out,
        h_in,
        x,
        w_block,
        q_block,
        block: BlockIndex::new(start, n, d_out).expect("block in range"),
    }
}

impl Instance {
    fn replay(&self, case: String) -> Replay {
        Replay {
            case: format!("{case} block_start={} n={}", self.block.start, self.block.n),
            matrices: vec![
                ("h_out", self.h_out.clone()),
                ("h_in", self.h_in.clone()),
                ("w_block", self.w_block.clone()),
                ("q_block", self.q_block.clone()),
            ],
        }
    }

    /// Earlier rows are fixed, so the oracle works on the trailing block of `H_out`.
    fn trailing_h_out(&self) -> Matrix<f64> {
        let d = self.h_out.rows();
        self.h_out.submatrix(self.block.start..d, self.block.start..d)
    }
}

fn oracle_rest(sys: kronquant::Result<KktSystem>, n: usize) -> Option<Matrix<f64>> {
    let sol = sys.ok()?.solve().ok()?;
    Some(sol.delta_w.row_block(n, sol.delta_w.rows()))
}

const PER_SEED: usize = 40;

pub fn joint_suite(seeds: &[u64], rule: JointRule) -> SuiteResult {
    let mut res = SuiteResult::new("joint-compensation", KKT_TOL);
    for &seed in seeds {
        for k in 0..PER_SEED as u64 {
            let case_seed = seed * 1000 + k;
            let inst = instance(case_seed);
            let n = inst.block.n;
            let err = chol_inv_upper(&inst.h_out)
                .and_then(|u| rule(&inst.w_block, &inst.q_block, &u, inst.block))
                .ok()
                .zip(oracle_rest(
                    KktSystem::joint(&inst.trailing_h_out(), &inst.h_in, (0..n).collect(), &inst.w_block, &inst.q_block),
                    n,
                ))
                .map_or(f64::INFINITY, |(ours, oracle)| rel_frobenius(&ours, &oracle));
            res.record(err, || inst.replay(format!("case_seed={case_seed}")));
        }
    }
    res
}

const ALPHAS: [f64; 3] = [0.05, 0.125, 0.25];

/// Residual-aware rule against the oracle, plus bit-identity with the plain
/// rule when the deviation vanishes.
pub fn residual_suite(seeds: &[u64]) -> SuiteResult {
    let mut res = SuiteResult::new("residual-compensation", KKT_TOL);
    for &seed in seeds {
        for k in 0..PER_SEED as u64 {
            let case_seed = 500_000 + seed * 1000 + k;
            let inst = instance(case_seed);
            let n = inst.block.n;
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed ^ 0xD1CE);
            let alpha = ALPHAS[k as usize % ALPHAS.len()];
            let dx = Matrix::<f64>::random_normal(inst.x.rows(), inst.x.cols(), 0.3, &mut rng);
            let x_tilde = inst.x.sub(&dx).expect("same shape");
            let Ok(u_out) = chol_inv_upper(&inst.h_out) else {
                res.record(f64::INFINITY, || inst.replay(format!("case_seed={case_seed} factorization failed")));
                continue;
            };
            let Ok(info) = ResidualInfo::from_deviation(&inst.x, &x_tilde, alpha, &inst.h_in) else {
                res.record(f64::INFINITY, || inst.replay(format!("case_seed={case_seed} residual setup failed")));
                continue;
            };
            let ours = joint_compensate_residual(&inst.w_block, &inst.q_block, &u_out, inst.block, &info).ok();
            let oracle = oracle_rest(
                KktSystem::joint_residual(&inst.trailing_h_out(), &inst.h_in, (0..n).collect(), &inst.w_block, &inst.q_block, &info.r),
                n,
            );
            let err = ours.zip(oracle).map_or(f64::INFINITY, |(a, b)| rel_frobenius(&a, &b));
            res.record(err, || {
                let mut r = inst.replay(format!("case_seed={case_seed} alpha={alpha}"));
                r.matrices.push(("r", info.r.clone()));
                r
            });

            let zero = ResidualInfo::from_deviation(&inst.x, &inst.x, alpha, &inst.h_in);
            let plain = joint_compensate(&inst.w_block, &inst.q_block, &u_out, inst.block);
            let with_zero = zero.and_then(|z| joint_compensate_residual(&inst.w_block, &inst.q_block, &u_out, inst.block, &z));
            let identical = matches!((plain, with_zero), (Ok(a), Ok(b)) if a == b);
            res.record(if identical { 0.0 } else { f64::INFINITY }, || {
                inst.replay(format!("case_seed={case_seed} zero deviation differs from the plain rule"))
            });
        }
    }
    res
}

/// `[H⁻¹]_{N:,B}·[H⁻¹]_{B,B}⁻¹ = [Uᵀ]_{N:,B}·[Uᵀ]_{B,B}⁻¹` for `B = 0..N`.
pub fn cholesky_identity_suite(seeds: &[u64]) -> SuiteResult {
    let mut res = SuiteResult::new("cholesky-identity", KKT_TOL);
    for &seed in seeds {
        for k in 0..20u64 {
            let case_seed = 900_000 + seed * 1000 + k;
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let d = [4, 8, 16][rng.random_range(0..3)];
            let n = [1, 2, 4][rng.random_range(0..3)].min(d / 2);
            let h = random_spd(d, &mut rng);
            let err = (|| -> kronquant::Result<f64> {
                let hinv = dense_inverse(&h)?;
                let lhs = hinv.submatrix(n..d, 0..n).matmul(&dense_inverse(&hinv.submatrix(0..n, 0..n))?)?;
                let ut = chol_inv_upper(&h)?.transpose();
                let rhs = ut.submatrix(n..d, 0..n).matmul(&dense_inverse(&ut.submatrix(0..n, 0..n))?)?;
                Ok(rel_frobenius(&rhs, &lhs))
            })()
            .unwrap_or(f64::INFINITY);
            res.record(err, || Replay {
                case: format!("case_seed={case_seed} n={n}"),
                matrices: vec![("h_out", h.clone())],
            });
        }
    }
    res
}

fn refine_instance(seed: u64) -> (RefineState<f64>, Vec<(&'static str, Matrix<f64>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_out, d_in) = (6, 8);
    let x = Matrix::<f64>::random_normal(d_in, 3 * d_in, 1.0, &mut rng);
    let g = Matrix::<f64>::random_normal(10, d_out, 1.0, &mut rng);
    let w = Matrix::<f64>::random_normal(d_out, d_in, 1.0, &mut rng);
    let h_in = x.gram_rows();
    let h_out = g.gram_cols();
    let grid = init_scales_for_block(&w, &h_in, 2, &default_candidates(), RangeMode::SignedSymmetric).expect("valid search");
    let (codes, _) = round_to_grid(&w, &grid).expect("valid grid");
    let dx = Matrix::<f64>::random_normal(d_in, 3 * d_in, 0.2, &mut rng);
    let r = dx.matmul_t(&x).expect("shapes").scale(0.25);
    let dump = vec![("w", w.clone()), ("h_in", h_in.clone()), ("h_out", h_out.clone()), ("r", r.clone())];
    (RefineState::new(w, codes, grid, h_in, h_out, r).expect("consistent shapes"), dump)
}

/// Each coordinate step against a three-point parabola fit of the objective,
/// and monotonicity over two full sweeps. The residual is the larger of the
/// relative step mismatch and the relative objective increase.
pub fn refinement_suite(seeds: &[u64]) -> SuiteResult {
    let mut res = SuiteResult::new("scale-refinement", FIT_TOL);
    for &seed in seeds {
        for k in 0..20u64 {
            let case_seed = 700_000 + seed * 1000 + k;
            let (mut st, dump) = refine_instance(case_seed);
            let mut worst = 0.0f64;
            let mut prev = st.loss();
            for _sweep in 0..2 {
                for j in 0..st.d_out() {
                    let s = st.scales()[j];
                    let probe = st.clone();
                    let fit = quadratic_fit_min(|v| probe.loss_with_scale(j, v), s, 0.1 * s);
                    let stepped = st.cd_scale_step(j);
                    let mismatch = match fit {
                        Some(f) if f > 0.0 => (stepped - f).abs() / f,
                        // A nonpositive vertex is rejected; the scale must stay put.
                        Some(_) if stepped == s => 0.0,
                        _ => f64::INFINITY,
                    };
                    let now = st.loss();
                    let increase = ((now - prev) / prev.abs().max(1e-300)).max(0.0);
                    worst = worst.max(mismatch).max(increase);
                    prev = now;
                }
            }
            res.record(worst, || Replay {
                case: format!("case_seed={case_seed}"),
                matrices: dump.clone(),
            });
        }
    }
    res
}

/// Identity output curvature yields no update; zero residual reduces the
/// extended inner loop to the plain one bit for bit.
pub fn reductions_suite(seeds: &[u64]) -> SuiteResult {
    let mut res = SuiteResult::new("reductions", 0.0);
    for &seed in seeds {
        for k in 0..20u64 {
            let case_seed = 300_000 + seed * 1000 + k;
            let inst = instance(case_seed);
            let d_out = inst.h_out.rows();
            let eye = Matrix::<f64>::identity(d_out);
            let zero_update = joint_compensate(&inst.w_block, &inst.q_block, &eye, inst.block).map_or(f64::INFINITY, |d| d.max_abs());
            res.record(zero_update, || inst.replay(format!("case_seed={case_seed} identity output curvature")));

            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let d_in = inst.h_in.rows();
            let w = Matrix::<f64>::random_normal(5, d_in, 1.0, &mut rng);
            let grid = QuantGrid::symmetric(vec![w.max_abs() / 3.0; 5], 3).expect("valid grid");
            let same = chol_inv_upper(&inst.h_in).is_ok_and(|u| {
                let plain = gptq_quantize(&w, &u, &grid);
                let ext = gptaq_quantize(&w, &u, &Matrix::zeros(d_in, d_in), &grid);
                matches!((plain, ext), (Ok(a), Ok(b)) if a == b)
            });
            res.record(if same { 0.0 } else { f64::INFINITY }, || Replay {
                case: format!("case_seed={case_seed} zero residual inner loop"),
                matrices: vec![("w", w.clone()), ("h_in", inst.h_in.clone())],
            });
        }
    }
    res
}

/// Explicit `‖G·ΔW·X̂‖²_F` against the trace form through the built curvature,
/// for query, key and value projections.
pub fn curvature_suite(seeds: &[u64]) -> SuiteResult {
    let mut res = SuiteResult::new("curvature-consistency", KKT_TOL);
    for &seed in seeds {
        for k in 0..4u64 {
            let case_seed = 100_000 + seed * 1000 + k;
            let block = AttnBlock::<f64>::random(case_seed, 8, 4, 2, BlockInit::default());
            let x = gen_calibration(case_seed + 1, 8, 12, 1, 4.0).expect("valid calibration");
            let (ctx, _) = forward_attention(&block, &x).expect("finite forward pass");
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            for h in 0..block.heads() {
                let dw = Matrix::<f64>::random_normal(4, 8, 1.0, &mut rng);
                let head = &ctx.heads[h];
                let w_out_h = block.w_out_head(h);
                let cases = [
                    ("query", build_hessian_query(&x, &head.k), head.k.clone(), x.clone()),
                    ("key", build_hessian_key(&x, &head.q), head.q.clone(), x.clone()),
                    ("value", build_hessian_value(&x, &head.a, &w_out_h), w_out_h.clone(), x.matmul_t(&head.a).expect("shapes")),
                ];
                for (name, hess, g, x_hat) in cases {
                    let err = (|| -> kronquant::Result<f64> {
                        let explicit = g.matmul(&dw)?.matmul(&x_hat)?.frobenius_sq();
                        let trace = hess?.quadratic_form(&dw)?;
                        Ok((explicit - trace).abs() / explicit.abs().max(1e-300))
                    })()
                    .unwrap_or(f64::INFINITY);
                    res.record(err, || Replay {
                        case: format!("case_seed={case_seed} head={h} layer={name}"),
                        matrices: vec![("g", g.clone()), ("delta_w", dw.clone()), ("x_hat", x_hat.clone())],
                    });
                }
            }
        }
    }
    res
}

pub fn run_all(opts: &ValidateOptions) -> Vec<SuiteResult> {
    vec![
        joint_suite(&opts.seeds, opts.joint_rule),
        residual_suite(&opts.seeds),
        cholesky_identity_suite(&opts.seeds),
        refinement_suite(&opts.seeds),
        reductions_suite(&opts.seeds),
        curvature_suite(&opts.seeds),
    ]
}

/// Writes each matrix of a failing case to `<dir>/<suite>/<name>.txt` plus a
/// `case.txt` describing it. Returns the directory.
pub fn dump_replay(dir: &Path, suite: &str, replay: &Replay) -> Result<PathBuf> {
    let target = dir.join(suite);
    std::fs::create_dir_all(&target).with_context(|| format!("creating {}", target.display()))?;
    std::fs::write(target.join("case.txt"), format!("{}\n", replay.case)).with_context(|| format!("writing {}", target.display()))?;
    for (name, m) in &replay.matrices {
        let path = target.join(format!("{name}.txt"));
        std::fs::write(&path, m.to_string()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(target)
}

/// Runs every suite, prints one line per suite, and dumps the first failing
/// case of each failing suite. Returns whether everything passed.
pub fn cmd_validate(opts: &ValidateOptions, out: &mut impl std::io::Write) -> Result<bool> {
    let mut all = true;
    for suite in run_all(opts) {
        let status = if suite.passed() { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{status} {}: max residual {:e} over {} cases (tol {:e})",
            suite.name, suite.max_residual, suite.cases, suite.tolerance
        )?;
        if let Some(replay) = &suite.failure {
            all = false;
            let path = dump_replay(&opts.replay_dir, suite.name, replay)?;
            writeln!(out, "  first failing case: {} (inputs in {})", replay.case, path.display())?;
        }
    }
    Ok(all)
}
