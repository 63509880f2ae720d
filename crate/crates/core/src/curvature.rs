//! Attention-aware Kronecker curvature `H = H_in ⊗ H_out` and its inverse
//! Cholesky factors.
//!
//! The builders are head-agnostic: callers pass per-head slices (`K_h`, `Q_h`,
//! `A_h`, `W_out,h`). Every Gram product is symmetrized as `(A + Aᵀ)/2` so the
//! factorizations downstream see exactly symmetric input.

use crate::error::{shape_err, Error, Result};
use crate::linalg::Cholesky;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Default relative damping applied before every inversion.
pub const DEFAULT_DAMPING: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct KronHessian<T> {
    /// Input-side factor, `d_in × d_in`.
    pub h_in: Matrix<T>,
    /// Output-side factor, `d_out × d_out`.
    pub h_out: Matrix<T>,
}

/// Upper-triangular `U` factors with `Uᵀ·U = H⁻¹` for both Kronecker factors.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactors<T> {
    pub u_in: Matrix<T>,
    pub u_out: Matrix<T>,
}

impl<T: Scalar> KronHessian<T> {
    pub fn new(h_in: Matrix<T>, h_out: Matrix<T>) -> Result<Self> {
        for (name, h) in [("h_in", &h_in), ("h_out", &h_out)] {
            if !h.is_square() || h.rows() == 0 {
                return Err(shape_err(
                    "KronHessian::new",
                    format!("nonempty square {name}"),
                    format!("{}x{}", h.rows(), h.cols()),
                ));
            }
        }
        Ok(Self { h_in, h_out })
    }

    pub fn d_in(&self) -> usize {
        self.h_in.rows()
    }

    pub fn d_out(&self) -> usize {
        self.h_out.rows()
    }

    pub fn damped(&self, lambda_frac: T) -> Self {
        Self {
            h_in: dampen(&self.h_in, lambda_frac),
            h_out: dampen(&self.h_out, lambda_frac),
        }
    }

    /// `tr(H_out · ΔW · H_in · ΔWᵀ)`, i.e. `‖G·ΔW·X‖²_F` in trace form.
    pub fn quadratic_form(&self, delta_w: &Matrix<T>) -> Result<T> {
        let left = self.h_out.matmul(delta_w)?;
        let right = delta_w.matmul(&self.h_in)?;
        Ok(left.frobenius_dot(&right))
    }
}

impl<T: Scalar> CholFactors<T> {
    /// Factors an already damped Hessian.
    pub fn from_hessian(hess: &KronHessian<T>) -> Result<Self> {
        Ok(Self {
            u_in: chol_inv_upper(&hess.h_in)?,
            u_out: chol_inv_upper(&hess.h_out)?,
        })
    }
}

fn check_nonempty<T: Scalar>(op: &'static str, name: &str, m: &Matrix<T>) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(shape_err(op, format!("nonempty {name}"), format!("{}x{}", m.rows(), m.cols())));
    }
    Ok(())
}

/// `x·xᵀ` for an activation matrix `x` of shape `d × L`.
fn input_gram<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.gram_rows().symmetrize()
}

fn context_gram<T: Scalar>(
    op: &'static str,
    x: &Matrix<T>,
    ctx: &Matrix<T>,
) -> Result<KronHessian<T>> {
    check_nonempty(op, "x", x)?;
    check_nonempty(op, "context", ctx)?;
    if ctx.rows() != x.cols() {
        return Err(shape_err(
            op,
            format!("context with {} rows (sequence length)", x.cols()),
            format!("{}x{}", ctx.rows(), ctx.cols()),
        ));
    }
    KronHessian::new(input_gram(x), ctx.gram_cols().symmetrize())
}

/// Query projection: `H_in = X·Xᵀ`, `H_out = K_hᵀ·K_h`.
pub fn build_hessian_query<T: Scalar>(x: &Matrix<T>, k_h: &Matrix<T>) -> Result<KronHessian<T>> {
    context_gram("build_hessian_query", x, k_h)
}

/// Key projection: `H_in = X·Xᵀ`, `H_out = Q_hᵀ·Q_h`.
pub fn build_hessian_key<T: Scalar>(x: &Matrix<T>, q_h: &Matrix<T>) -> Result<KronHessian<T>> {
    context_gram("build_hessian_key", x, q_h)
}

/// Checks that every row of `a` is a probability distribution.
pub fn validate_row_stochastic<T: Scalar>(a: &Matrix<T>, tol: f64) -> Result<()> {
    for i in 0..a.rows() {
        let row = a.row(i);
        let sum: T = row.iter().copied().sum();
        if row.iter().any(|&v| v < T::zero() || !v.is_finite())
            || (sum.to_f64_lossy() - 1.0).abs() > tol
        {
            return Err(Error::Validation(format!(
                "attention row {i} is not a probability distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Value projection: `H_in = X·A_hᵀ·A_h·Xᵀ`, `H_out = W_out,hᵀ·W_out,h`.
pub fn build_hessian_value<T: Scalar>(
    x: &Matrix<T>,
    a_h: &Matrix<T>,
    w_out_h: &Matrix<T>,
) -> Result<KronHessian<T>> {
    const OP: &str = "build_hessian_value";
    check_nonempty(OP, "x", x)?;
    check_nonempty(OP, "w_out_h", w_out_h)?;
    if a_h.rows() != x.cols() || a_h.cols() != x.cols() {
        return Err(shape_err(
            OP,
            format!("{0}x{0} attention", x.cols()),
            format!("{}x{}", a_h.rows(), a_h.cols()),
        ));
    }
    // Softmax rows sum to one only up to rounding in the working precision.
    let tol = (T::epsilon().to_f64_lossy() * 4.0 * x.cols() as f64).max(1e-8);
    validate_row_stochastic(a_h, tol)?;
    let xa = x.matmul_t(a_h)?;
    KronHessian::new(input_gram(&xa), w_out_h.gram_cols().symmetrize())
}

/// `h + lambda_frac · mean(diag(h)) · I`.
///
/// A zero matrix stays zero; the subsequent factorization rejects it.
pub fn dampen<T: Scalar>(h: &Matrix<T>, lambda_frac: T) -> Matrix<T> {
    let n = h.rows();
    let mut out = h.clone();
    if n == 0 {
        return out;
    }
    let mean = h.trace() / T::from_int(n as i64);
    let shift = lambda_frac * mean;
    for i in 0..n {
        out[(i, i)] += shift;
    }
    out
}

/// Upper-triangular `U = Chol(h⁻¹)ᵀ`, so that `Uᵀ·U = h⁻¹`.
pub fn chol_inv_upper<T: Scalar>(h: &Matrix<T>) -> Result<Matrix<T>> {
    let inv = Cholesky::factor(h)?.inverse();
    let lower = Cholesky::factor(&inv)?;
    Ok(lower.lower().transpose())
}
