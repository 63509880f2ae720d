//! Brute-force validators, independent of the closed forms they check.
//!
//! [`KktSystem`] assembles the full Lagrangian stationarity system of the
//! constrained compensation problems over `vec(ΔW)` plus the multipliers and
//! solves it densely with an LU factorization. [`scan_min_1d`] and
//! [`quadratic_fit_min`] minimize scalar functions by evaluation only.
//!
//! Only compiled with the `oracle` feature; nothing on the quantization path
//! uses this module.

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Cap on `d_out · d_in` for the assembled system.
pub const MAX_UNKNOWNS: usize = 512;

/// `min tr(H_out·ΔW·H_in·ΔWᵀ) + ⟨linear_term, ΔW⟩  s.t. ΔW[B,:] = rhs_block`.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub h_out: Matrix<f64>,
    pub h_in: Matrix<f64>,
    pub constrained_rows: Vec<usize>,
    pub rhs_block: Matrix<f64>,
    pub linear_term: Matrix<f64>,
}

#[derive(Debug, Clone)]
pub struct KktSolution {
    pub delta_w: Matrix<f64>,
    /// Row `i` holds `λ_iᵀ` for constrained row `constrained_rows[i]`.
    pub multipliers: Matrix<f64>,
}

impl KktSystem {
    /// Problem with no linear term: the rows in `block_rows` are forced to
    /// `q_block − w_block`.
    pub fn joint(
        h_out: &Matrix<f64>,
        h_in: &Matrix<f64>,
        block_rows: Vec<usize>,
        w_block: &Matrix<f64>,
        q_block: &Matrix<f64>,
    ) -> Result<Self> {
        let sys = Self {
            h_out: h_out.clone(),
            h_in: h_in.clone(),
            constrained_rows: block_rows,
            rhs_block: q_block.sub(w_block)?,
            linear_term: Matrix::zeros(h_out.rows(), h_in.rows()),
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Adds the inherited-deviation term `2·tr([H_out]_{:,B}·W_B·R·ΔWᵀ)`,
    /// whose gradient is `2·[H_out]_{:,B}·W_B·R`.
    pub fn joint_residual(
        h_out: &Matrix<f64>,
        h_in: &Matrix<f64>,
        block_rows: Vec<usize>,
        w_block: &Matrix<f64>,
        q_block: &Matrix<f64>,
        r: &Matrix<f64>,
    ) -> Result<Self> {
        let mut sys = Self::joint(h_out, h_in, block_rows, w_block, q_block)?;
        let h_cols = Matrix::from_fn(h_out.rows(), sys.constrained_rows.len(), |a, i| {
            h_out[(a, sys.constrained_rows[i])]
        });
        sys.linear_term = h_cols.matmul(w_block)?.matmul(r)?.scale(2.0);
        Ok(sys)
    }

    fn validate(&self) -> Result<()> {
        const OP: &str = "KktSystem";
        let d_out = self.h_out.rows();
        let d_in = self.h_in.rows();
        if !self.h_out.is_square() || !self.h_in.is_square() {
            return Err(shape_err(OP, "square Hessian factors", "non-square factor"));
        }
        if self.constrained_rows.is_empty() {
            return Err(Error::Validation("KKT oracle needs at least one constrained row".into()));
        }
        if self.constrained_rows.iter().any(|&r| r >= d_out) {
            return Err(Error::Validation("constrained row out of range".into()));
        }
        if self.rhs_block.shape() != (self.constrained_rows.len(), d_in) {
            return Err(shape_err(
                OP,
                format!("{}x{d_in} rhs", self.constrained_rows.len()),
                format!("{}x{}", self.rhs_block.rows(), self.rhs_block.cols()),
            ));
        }
        if self.linear_term.shape() != (d_out, d_in) {
            return Err(shape_err(
                OP,
                format!("{d_out}x{d_in} linear term"),
                format!("{}x{}", self.linear_term.rows(), self.linear_term.cols()),
            ));
        }
        if d_out * d_in > MAX_UNKNOWNS {
            return Err(Error::Validation(format!(
                "{} unknowns exceed the oracle cap of {MAX_UNKNOWNS}",
                d_out * d_in
            )));
        }
        Ok(())
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.h_out.rows(), self.h_in.rows(), self.constrained_rows.len())
    }

    pub fn solve(&self) -> Result<KktSolution> {
        self.validate()?;
        let (d_out, d_in, n) = self.dims();
        let nw = d_out * d_in;
        let size = nw + n * d_in;
        let mut a = DMatrix::<f64>::zeros(size, size);
        let mut rhs = DVector::<f64>::zeros(size);
        let w_idx = |row: usize, col: usize| row * d_in + col;

        // Stationarity: 2·H_out·ΔW·H_in + Σ e_i λ_iᵀ + linear_term = 0.
        for ra in 0..d_out {
            for cb in 0..d_in {
                let eq = w_idx(ra, cb);
                for rc in 0..d_out {
                    let ho = self.h_out[(ra, rc)];
                    if ho == 0.0 {
                        continue;
                    }
                    for ce in 0..d_in {
                        a[(eq, w_idx(rc, ce))] += 2.0 * ho * self.h_in[(ce, cb)];
                    }
                }
                rhs[eq] = -self.linear_term[(ra, cb)];
            }
        }
        for (i, &row) in self.constrained_rows.iter().enumerate() {
            for b in 0..d_in {
                let lam = nw + i * d_in + b;
                a[(w_idx(row, b), lam)] += 1.0;
                // Primal feasibility: ΔW[row, b] = rhs_block[i, b].
                a[(lam, w_idx(row, b))] = 1.0;
                rhs[lam] = self.rhs_block[(i, b)];
            }
        }

        let sol = a.lu().solve(&rhs).ok_or(Error::Singular {
            op: "kkt_solve",
            index: 0,
            value: 0.0,
        })?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "kkt_solve solution".into(),
            });
        }
        let delta_w = Matrix::from_fn(d_out, d_in, |r, c| sol[w_idx(r, c)]);
        let multipliers = Matrix::from_fn(n, d_in, |i, b| sol[nw + i * d_in + b]);
        Ok(KktSolution { delta_w, multipliers })
    }

    /// `tr(H_out·ΔW·H_in·ΔWᵀ) + ⟨linear_term, ΔW⟩`.
    pub fn objective(&self, delta_w: &Matrix<f64>) -> f64 {
        let left = self.h_out.matmul(delta_w).expect("oracle shapes");
        let right = delta_w.matmul(&self.h_in).expect("oracle shapes");
        left.frobenius_dot(&right) + self.linear_term.frobenius_dot(delta_w)
    }

    /// Max-abs residuals `(stationarity, feasibility)` of a candidate solution.
    pub fn residuals(&self, sol: &KktSolution) -> (f64, f64) {
        let (_, d_in, _) = self.dims();
        let mut stat = self
            .h_out
            .matmul(&sol.delta_w)
            .and_then(|m| m.matmul(&self.h_in))
            .expect("oracle shapes")
            .scale(2.0)
            .add(&self.linear_term)
            .expect("oracle shapes");
        for (i, &row) in self.constrained_rows.iter().enumerate() {
            for b in 0..d_in {
                stat[(row, b)] += sol.multipliers[(i, b)];
            }
        }
        let mut feas: f64 = 0.0;
        for (i, &row) in self.constrained_rows.iter().enumerate() {
            for b in 0..d_in {
                feas = feas.max((sol.delta_w[(row, b)] - self.rhs_block[(i, b)]).abs());
            }
        }
        (stat.max_abs(), feas)
    }
}

/// Solves the system and returns `ΔW` for all rows.
pub fn kkt_solve(sys: &KktSystem) -> Result<Matrix<f64>> {
    sys.solve().map(|s| s.delta_w)
}

/// Inverse of a square matrix through a dense LU factorization.
pub fn dense_inverse(m: &Matrix<f64>) -> Result<Matrix<f64>> {
    if !m.is_square() {
        return Err(shape_err("dense_inverse", "square matrix", format!("{}x{}", m.rows(), m.cols())));
    }
    let inv = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
        .try_inverse()
        .ok_or_else(|| Error::Validation("matrix is singular".into()))?;
    Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| inv[(i, j)]))
}

fn eval(f: &mut impl FnMut(f64) -> f64, x: f64) -> Result<f64> {
    let v = f(x);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: format!("scan objective at {x}"),
        });
    }
    Ok(v)
}

/// Dense scan over `steps` equispaced points of `[lo, hi]` followed by one
/// parabola refinement on the best interior triple.
pub fn scan_min_1d(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, steps: usize) -> Result<f64> {
    if !(lo < hi) || steps < 3 {
        return Err(Error::Validation(format!(
            "scan needs lo < hi and at least 3 steps (got [{lo}, {hi}], {steps})"
        )));
    }
    let h = (hi - lo) / (steps - 1) as f64;
    let xs: Vec<f64> = (0..steps).map(|i| if i == steps - 1 { hi } else { lo + h * i as f64 }).collect();
    let mut fs = Vec::with_capacity(steps);
    for &x in &xs {
        fs.push(eval(&mut f, x)?);
    }
    let best = (0..steps)
        .min_by(|&a, &b| fs[a].partial_cmp(&fs[b]).expect("finite"))
        .expect("nonempty");
    if best == 0 || best == steps - 1 {
        return Ok(xs[best]);
    }
    let (fm, f0, fp) = (fs[best - 1], fs[best], fs[best + 1]);
    let curv = fp - 2.0 * f0 + fm;
    if curv > 0.0 {
        let x = xs[best] - 0.5 * h * (fp - fm) / curv;
        if x >= xs[best - 1] && x <= xs[best + 1] && eval(&mut f, x)? <= f0 {
            return Ok(x);
        }
    }
    Ok(xs[best])
}

/// Vertex of the parabola through `f` at `center − step`, `center`, `center + step`.
/// `None` when the three values are not strictly convex.
pub fn quadratic_fit_min(mut f: impl FnMut(f64) -> f64, center: f64, step: f64) -> Option<f64> {
    let fm = f(center - step);
    let f0 = f(center);
    let fp = f(center + step);
    let curv = fp - 2.0 * f0 + fm;
    (curv > 0.0).then(|| center - 0.5 * step * (fp - fm) / curv)
}
