//! Coordinate-descent refinement of per-channel scales with frozen integer codes.
//!
//! The objective is `‖G(diag(s)·V − W)X + G·W·ΔX‖²_F`, written without its
//! constant term as
//!
//! ```text
//! L(s) = tr(H_out·ΔW·H_in·ΔWᵀ) + 2·tr(H_out·ΔW·Rᵀ·Wᵀ),   ΔW = diag(s)·V − W
//! ```
//!
//! with `V = W_int − z·1ᵀ`. `L` is quadratic in every `s_j`, so each coordinate
//! step jumps straight to the 1-D minimizer.

use crate::error::{shape_err, Result};
use crate::grid::QuantGrid;
use crate::matrix::{dot, IntMatrix, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct RefineState<T> {
    w: Matrix<T>,
    w_int: IntMatrix,
    grid: QuantGrid<T>,
    q: Matrix<T>,
    h_in: Matrix<T>,
    h_out: Matrix<T>,
    r: Matrix<T>,
    // Cached rows of V·H_in and V·Rᵀ; both depend only on the frozen codes.
    v_h_in: Matrix<T>,
    v_rt: Matrix<T>,
}

impl<T: Scalar> RefineState<T> {
    pub fn new(
        w: Matrix<T>,
        w_int: IntMatrix,
        grid: QuantGrid<T>,
        h_in: Matrix<T>,
        h_out: Matrix<T>,
        r: Matrix<T>,
    ) -> Result<Self> {
        const OP: &str = "RefineState::new";
        let (d_out, d_in) = w.shape();
        if w_int.shape() != (d_out, d_in) || grid.len() != d_out {
            return Err(shape_err(
                OP,
                format!("{d_out}x{d_in} codes and {d_out} scales"),
                format!("{}x{} codes, {} scales", w_int.rows(), w_int.cols(), grid.len()),
            ));
        }
        for (name, m, n) in [("h_in", &h_in, d_in), ("h_out", &h_out, d_out), ("r", &r, d_in)] {
            if m.shape() != (n, n) {
                return Err(shape_err(OP, format!("{n}x{n} {name}"), format!("{}x{}", m.rows(), m.cols())));
            }
        }
        let v = grid.centered_matrix(&w_int);
        let v_h_in = v.matmul(&h_in)?;
        let v_rt = v.matmul_t(&r)?;
        let q = grid.dequantize_matrix(&w_int);
        Ok(Self {
            w,
            w_int,
            grid,
            q,
            h_in,
            h_out,
            r,
            v_h_in,
            v_rt,
        })
    }

    pub fn scales(&self) -> &[T] {
        &self.grid.scales
    }

    pub fn grid(&self) -> &QuantGrid<T> {
        &self.grid
    }

    pub fn q(&self) -> &Matrix<T> {
        &self.q
    }

    pub fn w_int(&self) -> &IntMatrix {
        &self.w_int
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    /// Objective with the constant term dropped.
    pub fn loss(&self) -> T {
        let dw = self.q.sub(&self.w).expect("shapes fixed at construction");
        let quad = self
            .h_out
            .matmul(&dw)
            .and_then(|a| Ok(a.frobenius_dot(&dw.matmul(&self.h_in)?)))
            .expect("shapes fixed at construction");
        // tr(H_out·ΔW·Rᵀ·Wᵀ) = ⟨H_out·ΔW, W·R⟩_F
        let cross = self
            .h_out
            .matmul(&dw)
            .and_then(|a| Ok(a.frobenius_dot(&self.w.matmul(&self.r)?)))
            .expect("shapes fixed at construction");
        quad + T::lit(2.0) * cross
    }

    /// Objective after setting `s_j = value`, leaving the state unchanged.
    pub fn loss_with_scale(&self, j: usize, value: T) -> T {
        let mut probe = self.clone();
        probe.set_scale(j, value);
        probe.loss()
    }

    fn set_scale(&mut self, j: usize, value: T) {
        self.grid.scales[j] = value;
        for c in 0..self.w_int.cols() {
            self.q[(j, c)] = self.grid.dequantize(self.w_int[(j, c)], j);
        }
    }

    /// Closed-form coordinate step for channel `j`:
    ///
    /// `s_j ← s_j + [V(H_in(W−Q)ᵀ − RᵀWᵀ)H_out]_jj / ([V·H_in·Vᵀ]_jj·[H_out]_jj)`.
    ///
    /// Channels with a zero denominator keep their scale. Returns the new `s_j`.
    pub fn cd_scale_step(&mut self, j: usize) -> T {
        let vh = self.v_h_in.row(j);
        let vr = self.v_rt.row(j);
        let v: Vec<T> = (0..self.w_int.cols()).map(|c| self.grid.centered(self.w_int[(j, c)], j)).collect();
        let denom = dot(vh, &v) * self.h_out[(j, j)];
        if !(denom > T::zero()) || !denom.is_finite() {
            return self.grid.scales[j];
        }
        let mut numer = T::zero();
        for k in 0..self.d_out() {
            let hkj = self.h_out[(k, j)];
            if hkj == T::zero() {
                continue;
            }
            let wk = self.w.row(k);
            let qk = self.q.row(k);
            let mut a = T::zero();
            for c in 0..wk.len() {
                a += vh[c] * (wk[c] - qk[c]) - vr[c] * wk[c];
            }
            numer += a * hkj;
        }
        let s_new = self.grid.scales[j] + numer / denom;
        // A sign flip would make the grid invalid; keep the incumbent instead.
        if s_new > T::zero() && s_new.is_finite() {
            self.set_scale(j, s_new);
        }
        self.grid.scales[j]
    }

    /// `n_iter` ascending sweeps over all channels. Returns the refined scales.
    pub fn refine_scales(&mut self, n_iter: usize) -> Vec<T> {
        for _ in 0..n_iter {
            for j in 0..self.d_out() {
                self.cd_scale_step(j);
            }
        }
        self.grid.scales.clone()
    }

    pub fn into_parts(self) -> (IntMatrix, QuantGrid<T>) {
        (self.w_int, self.grid)
    }
}
