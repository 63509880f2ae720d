//! Closed-form error compensation.
//!
//! * in-channel direction: the GPTQ column update and the GPTAQ inner loop,
//!   both driven by `U_in = Chol(H_in⁻¹)ᵀ`;
//! * out-channel direction: joint compensation of a block of `N` rows that were
//!   quantized together, driven by `U_out = Chol(H_out⁻¹)ᵀ`, optionally with the
//!   extra term that absorbs input deviation inherited from earlier blocks.
//!
//! Out-channel routines take the full `U_out` and a [`BlockIndex`]; the rows
//! updated are every row after the block. Because `U_out` is upper triangular,
//! its trailing principal submatrix is the factor of the subproblem left after
//! earlier rows were frozen, so indexing into the full factor is equivalent to
//! refactoring the remaining rows.

use crate::error::{shape_err, Error, Result};
use crate::grid::QuantGrid;
use crate::linalg::{solve_lower_triangular, Cholesky};
use crate::matrix::{IntMatrix, Matrix};
use crate::scalar::Scalar;

/// Contiguous block of out-channels `start..start + n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIndex {
    pub start: usize,
    pub n: usize,
}

impl BlockIndex {
    pub fn new(start: usize, n: usize, d_out: usize) -> Result<Self> {
        if n == 0 || start + n > d_out {
            return Err(Error::Validation(format!(
                "block {start}..{} does not fit in {d_out} out-channels",
                start + n
            )));
        }
        Ok(Self { start, n })
    }

    pub fn end(&self) -> usize {
        self.start + self.n
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Deviation correlation `R = α·ΔX·Xᵀ` with the factor of the damped `H_in`.
#[derive(Debug, Clone)]
pub struct ResidualInfo<T> {
    pub r: Matrix<T>,
    pub alpha: T,
    h_in_chol: Cholesky<T>,
}

impl<T: Scalar> ResidualInfo<T> {
    /// `r` must already carry the `α` factor.
    pub fn new(r: Matrix<T>, h_in: &Matrix<T>, alpha: T) -> Result<Self> {
        if alpha < T::zero() {
            return Err(Error::Validation("alpha must be nonnegative".into()));
        }
        if r.shape() != h_in.shape() || !r.is_square() {
            return Err(shape_err(
                "ResidualInfo::new",
                format!("{0}x{0} r", h_in.rows()),
                format!("{}x{}", r.rows(), r.cols()),
            ));
        }
        Ok(Self {
            r,
            alpha,
            h_in_chol: Cholesky::factor(h_in)?,
        })
    }

    /// `R = α·(x − x_tilde)·xᵀ`.
    pub fn from_deviation(x: &Matrix<T>, x_tilde: &Matrix<T>, alpha: T, h_in: &Matrix<T>) -> Result<Self> {
        let r = x.sub(x_tilde)?.matmul_t(x)?.scale(alpha);
        Self::new(r, h_in, alpha)
    }

    /// No inherited deviation.
    pub fn zero(h_in: &Matrix<T>) -> Result<Self> {
        Self::new(Matrix::zeros(h_in.rows(), h_in.cols()), h_in, T::zero())
    }

    pub fn h_in_cholesky(&self) -> &Cholesky<T> {
        &self.h_in_chol
    }

    pub fn h_in_inv(&self) -> Matrix<T> {
        self.h_in_chol.inverse()
    }
}

fn check_factor<T: Scalar>(op: &'static str, u: &Matrix<T>, d: usize) -> Result<()> {
    if u.shape() != (d, d) {
        return Err(shape_err(op, format!("{d}x{d} factor"), format!("{}x{}", u.rows(), u.cols())));
    }
    Ok(())
}

fn pivot<T: Scalar>(op: &'static str, u: &Matrix<T>, j: usize) -> Result<T> {
    let d = u[(j, j)];
    if d == T::zero() || !d.is_finite() {
        return Err(Error::Singular {
            op,
            index: j,
            value: d.to_f64_lossy(),
        });
    }
    Ok(d)
}

/// Quantizes column `p` of `w` and pushes its error onto columns `> p`:
/// `Δw = −(w_p − q_p)/U_pp · U_{p,p:}` per row. Column `p` is left equal to `q_p`.
pub fn gptq_column_step<T: Scalar>(
    w: &mut Matrix<T>,
    p: usize,
    u_in: &Matrix<T>,
    grid: &QuantGrid<T>,
) -> Result<(Vec<i32>, Vec<T>)> {
    const OP: &str = "gptq_column_step";
    check_factor(OP, u_in, w.cols())?;
    if grid.len() != w.rows() {
        return Err(shape_err(OP, format!("{} channels", w.rows()), format!("{}", grid.len())));
    }
    let upp = pivot(OP, u_in, p)?;
    let cols = w.cols();
    let mut codes = Vec::with_capacity(w.rows());
    let mut qcol = Vec::with_capacity(w.rows());
    let urow = u_in.row(p);
    for i in 0..w.rows() {
        let wp = w[(i, p)];
        let c = grid.quantize(wp, i);
        let q = grid.dequantize(c, i);
        let e = (wp - q) / upp;
        let row = w.row_mut(i);
        row[p] = q;
        for k in p + 1..cols {
            row[k] -= e * urow[k];
        }
        codes.push(c);
        qcol.push(q);
    }
    Ok((codes, qcol))
}

/// Plain GPTQ inner loop over all in-channels.
pub fn gptq_quantize<T: Scalar>(
    w: &Matrix<T>,
    u_in: &Matrix<T>,
    grid: &QuantGrid<T>,
) -> Result<(Matrix<T>, IntMatrix)> {
    let mut work = w.clone();
    let mut q = Matrix::zeros(w.rows(), w.cols());
    let mut w_int = IntMatrix::filled(w.rows(), w.cols(), 0);
    for p in 0..w.cols() {
        let (codes, qcol) = gptq_column_step(&mut work, p, u_in, grid)?;
        for i in 0..w.rows() {
            w_int[(i, p)] = codes[i];
            q[(i, p)] = qcol[i];
        }
    }
    Ok((q, w_int))
}

/// `P = (R·U_inᵀ ⊙ M_U)·U_in` with `M_U` the strictly upper-triangular mask.
pub fn gptaq_p_matrix<T: Scalar>(r: &Matrix<T>, u_in: &Matrix<T>) -> Result<Matrix<T>> {
    let mut ru = r.matmul_t(u_in)?;
    for i in 0..ru.rows() {
        for j in 0..=i.min(ru.cols() - 1) {
            ru[(i, j)] = T::zero();
        }
    }
    ru.matmul(u_in)
}

/// GPTAQ inner loop: column-wise quantization whose updates also absorb the
/// inherited input deviation through `P`.
///
/// Returns `(Q, W_int)` with `Q` rebuilt from the codes.
pub fn gptaq_quantize<T: Scalar>(
    w: &Matrix<T>,
    u_in: &Matrix<T>,
    r: &Matrix<T>,
    grid: &QuantGrid<T>,
) -> Result<(Matrix<T>, IntMatrix)> {
    const OP: &str = "gptaq_quantize";
    let (m, d_in) = w.shape();
    check_factor(OP, u_in, d_in)?;
    check_factor(OP, r, d_in)?;
    if grid.len() != m {
        return Err(shape_err(OP, format!("{m} channels"), format!("{}", grid.len())));
    }
    let p_mat = gptaq_p_matrix(r, u_in)?;
    let mut work = w.clone();
    let mut w_int = IntMatrix::filled(m, d_in, 0);
    let mut e = vec![T::zero(); m];
    let mut wj = vec![T::zero(); m];
    for j in 0..d_in {
        let ujj = pivot(OP, u_in, j)?;
        for i in 0..m {
            let c = grid.quantize(work[(i, j)], i);
            w_int[(i, j)] = c;
            wj[i] = work[(i, j)];
            e[i] = (wj[i] - grid.dequantize(c, i)) / ujj;
        }
        let urow = u_in.row(j);
        let prow = p_mat.row(j);
        for i in 0..m {
            let row = work.row_mut(i);
            for k in j + 1..d_in {
                row[k] = row[k] - e[i] * urow[k] - wj[i] * prow[k];
            }
        }
    }
    Ok((grid.dequantize_matrix(&w_int), w_int))
}

/// `−[U_outᵀ]_{rest,B} · [U_outᵀ]_{B,B}⁻¹ · rhs` for the rows after the block.
fn propagate_block<T: Scalar>(
    op: &'static str,
    u_out: &Matrix<T>,
    block: BlockIndex,
    rhs: &Matrix<T>,
) -> Result<Matrix<T>> {
    let d_out = u_out.rows();
    if !u_out.is_square() || block.end() > d_out {
        return Err(shape_err(
            op,
            format!("square factor covering rows {}..{}", block.start, block.end()),
            format!("{}x{}", u_out.rows(), u_out.cols()),
        ));
    }
    // [U_outᵀ]_{B,B} is lower triangular.
    let l_bb = Matrix::from_fn(block.n, block.n, |a, b| u_out[(block.start + b, block.start + a)]);
    let y = solve_lower_triangular(&l_bb, rhs, op)?;
    let rest = block.end()..d_out;
    let mut delta = Matrix::zeros(rest.len(), rhs.cols());
    for (ri, r) in rest.enumerate() {
        let out = delta.row_mut(ri);
        for b in 0..block.n {
            let coef = u_out[(block.start + b, r)];
            if coef == T::zero() {
                continue;
            }
            for (o, &yv) in out.iter_mut().zip(y.row(b)) {
                *o -= coef * yv;
            }
        }
    }
    Ok(delta)
}

fn block_error<T: Scalar>(op: &'static str, w_block: &Matrix<T>, q_block: &Matrix<T>, block: BlockIndex) -> Result<Matrix<T>> {
    if w_block.rows() != block.n {
        return Err(shape_err(op, format!("{} block rows", block.n), format!("{}", w_block.rows())));
    }
    w_block.sub(q_block)
}

/// Update for the rows after `block` once the block rows were replaced by
/// `q_block`: `ΔW = −[U_outᵀ]_{rest,B}·[U_outᵀ]_{B,B}⁻¹·(W_B − Q_B)`.
pub fn joint_compensate<T: Scalar>(
    w_block: &Matrix<T>,
    q_block: &Matrix<T>,
    u_out: &Matrix<T>,
    block: BlockIndex,
) -> Result<Matrix<T>> {
    const OP: &str = "joint_compensate";
    let d = block_error(OP, w_block, q_block, block)?;
    propagate_block(OP, u_out, block, &d)
}

/// Residual-aware variant:
/// `ΔW = −[U_outᵀ]_{rest,B}·[U_outᵀ]_{B,B}⁻¹·((W_B − Q_B) − W_B·R·H_in⁻¹)`.
///
/// `H_in⁻¹` is applied through the stored Cholesky factor.
pub fn joint_compensate_residual<T: Scalar>(
    w_block: &Matrix<T>,
    q_block: &Matrix<T>,
    u_out: &Matrix<T>,
    block: BlockIndex,
    res: &ResidualInfo<T>,
) -> Result<Matrix<T>> {
    const OP: &str = "joint_compensate_residual";
    let d = block_error(OP, w_block, q_block, block)?;
    let wr = w_block.matmul(&res.r)?;
    let correction = res.h_in_chol.right_solve(&wr)?;
    let rhs = d.sub(&correction)?;
    propagate_block(OP, u_out, block, &rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::chol_inv_upper;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let a = Matrix::<f64>::random_normal(n, n + 2, 1.0, rng);
        a.gram_rows().add(&Matrix::identity(n).scale(0.05)).unwrap()
    }

    #[test]
    fn lossless_column_leaves_rest() {
        let mut w = Matrix::from_rows(&[vec![1.0, 0.3, -0.7], vec![-2.0, 0.1, 0.2]]);
        let before = w.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = chol_inv_upper(&spd(3, &mut rng)).unwrap();
        let grid = QuantGrid::symmetric(vec![1.0, 1.0], 4).unwrap();
        let (codes, q) = gptq_column_step(&mut w, 0, &u, &grid).unwrap();
        assert_eq!(codes, vec![1, -2]);
        assert_eq!(q, vec![1.0, -2.0]);
        assert_eq!(w, before);
    }

    #[test]
    fn identity_factor_does_not_propagate() {
        let mut w = Matrix::from_rows(&[vec![0.4, 0.3, -0.7]]);
        let grid = QuantGrid::symmetric(vec![1.0], 4).unwrap();
        gptq_column_step(&mut w, 0, &Matrix::identity(3), &grid).unwrap();
        assert_eq!(w.row(0), &[0.0, 0.3, -0.7]);
    }

    #[test]
    fn zero_pivot_is_singular() {
        let mut w = Matrix::from_rows(&[vec![0.4, 0.3]]);
        let grid = QuantGrid::symmetric(vec![1.0], 4).unwrap();
        let u = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert!(matches!(gptq_column_step(&mut w, 0, &u, &grid), Err(Error::Singular { .. })));
    }

    #[test]
    fn gptq_beats_plain_rounding_on_aggregate() {
        // Greedy column updates are not better on every instance, only on average.
        let (mut total_gptq, mut total_rtn) = (0.0, 0.0);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            // Correlated inputs give the column updates something to exploit.
            let mix = Matrix::<f64>::random_normal(16, 16, 1.0, &mut rng);
            let x = mix.matmul(&Matrix::random_normal(16, 48, 1.0, &mut rng)).unwrap();
            let w = Matrix::<f64>::random_normal(4, 16, 1.0, &mut rng);
            let h = crate::curvature::dampen(&x.gram_rows(), 0.01);
            let u = chol_inv_upper(&h).unwrap();
            let grid = QuantGrid::symmetric(vec![w.max_abs() / 3.0; 4], 3).unwrap();
            let (q, _) = gptq_quantize(&w, &u, &grid).unwrap();
            let (_, rtn) = crate::grid::round_to_grid(&w, &grid).unwrap();
            let err_gptq = q.sub(&w).unwrap().matmul(&x).unwrap().frobenius_sq();
            let err_rtn = rtn.sub(&w).unwrap().matmul(&x).unwrap().frobenius_sq();
            total_gptq += err_gptq;
            total_rtn += err_rtn;
        }
        assert!(total_gptq < 0.8 * total_rtn, "{total_gptq} vs {total_rtn}");
    }

    #[test]
    fn gptaq_lossless_grid() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.25, -0.75]]);
        let grid = QuantGrid::symmetric(vec![1.0, 0.25], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = chol_inv_upper(&spd(3, &mut rng)).unwrap();
        let r = Matrix::<f64>::random_normal(3, 3, 1.0, &mut rng);
        let (q, _) = gptaq_quantize(&w, &u, &Matrix::zeros(3, 3), &grid).unwrap();
        assert_eq!(q, w);
        // With a nonzero residual the P-term still moves later columns.
        let (q_r, _) = gptaq_quantize(&w, &u, &r, &grid).unwrap();
        assert_eq!(q_r.column(0), w.column(0));
    }

    #[test]
    fn p_matrix_vanishes_for_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = chol_inv_upper(&spd(5, &mut rng)).unwrap();
        assert_eq!(gptaq_p_matrix(&Matrix::zeros(5, 5), &u).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn identity_out_factor_gives_zero_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wb = Matrix::<f64>::random_normal(2, 4, 1.0, &mut rng);
        let qb = Matrix::<f64>::random_normal(2, 4, 1.0, &mut rng);
        let dw = joint_compensate(&wb, &qb, &Matrix::identity(6), BlockIndex::new(0, 2, 6).unwrap()).unwrap();
        assert_eq!(dw.shape(), (4, 4));
        assert!(dw.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lossless_block_gives_zero_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = chol_inv_upper(&spd(5, &mut rng)).unwrap();
        let wb = Matrix::<f64>::random_normal(2, 3, 1.0, &mut rng);
        let dw = joint_compensate(&wb, &wb, &u, BlockIndex::new(1, 2, 5).unwrap()).unwrap();
        assert_eq!(dw.shape(), (2, 3));
        assert_eq!(dw.max_abs(), 0.0);
    }

    #[test]
    fn single_channel_is_scalar_divide() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = chol_inv_upper(&spd(6, &mut rng)).unwrap();
        let wb = Matrix::<f64>::random_normal(1, 4, 1.0, &mut rng);
        let qb = Matrix::<f64>::random_normal(1, 4, 1.0, &mut rng);
        let dw = joint_compensate(&wb, &qb, &u, BlockIndex::new(0, 1, 6).unwrap()).unwrap();
        for r in 1..6 {
            for c in 0..4 {
                let expect = -u[(0, r)] / u[(0, 0)] * (wb[(0, c)] - qb[(0, c)]);
                assert!((dw[(r - 1, c)] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn offset_block_equals_trailing_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = spd(7, &mut rng);
        let u = chol_inv_upper(&h).unwrap();
        let wb = Matrix::<f64>::random_normal(2, 3, 1.0, &mut rng);
        let qb = Matrix::<f64>::random_normal(2, 3, 1.0, &mut rng);
        let global = joint_compensate(&wb, &qb, &u, BlockIndex::new(2, 2, 7).unwrap()).unwrap();
        // Factor of the trailing principal block of H⁻¹ restricted to rows 2.. of H.
        let tail = chol_inv_upper(&h.submatrix(2..7, 2..7)).unwrap();
        let local = joint_compensate(&wb, &qb, &tail, BlockIndex::new(0, 2, 5).unwrap()).unwrap();
        assert!(global.rel_diff(&local, 1e-300) < 1e-10);
    }

    #[test]
    fn residual_with_zero_r_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h_out = spd(6, &mut rng);
        let h_in = spd(4, &mut rng);
        let u = chol_inv_upper(&h_out).unwrap();
        let wb = Matrix::<f64>::random_normal(2, 4, 1.0, &mut rng);
        let qb = Matrix::<f64>::random_normal(2, 4, 1.0, &mut rng);
        let block = BlockIndex::new(0, 2, 6).unwrap();
        let plain = joint_compensate(&wb, &qb, &u, block).unwrap();
        let res = ResidualInfo::zero(&h_in).unwrap();
        let with_res = joint_compensate_residual(&wb, &qb, &u, block, &res).unwrap();
        assert_eq!(plain, with_res);

        let r = Matrix::<f64>::random_normal(4, 4, 1.0, &mut rng);
        let res = ResidualInfo::new(r, &h_in, 0.25).unwrap();
        let dw = joint_compensate_residual(&wb, &qb, &Matrix::identity(6), block, &res).unwrap();
        assert_eq!(dw.max_abs(), 0.0);
    }

    #[test]
    fn residual_info_from_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Matrix::<f64>::random_normal(3, 8, 1.0, &mut rng);
        let h = crate::curvature::dampen(&x.gram_rows(), 0.01);
        let res = ResidualInfo::from_deviation(&x, &x, 0.25, &h).unwrap();
        assert_eq!(res.r.max_abs(), 0.0);
        let res = ResidualInfo::from_deviation(&x, &x.scale(0.5), 0.0, &h).unwrap();
        assert_eq!(res.r.max_abs(), 0.0);
        assert!(ResidualInfo::from_deviation(&x, &x, -1.0, &h).is_err());
        let inv = res.h_in_inv();
        assert!(inv.matmul(&h).unwrap().rel_diff(&Matrix::identity(3), 1.0) < 1e-10);
    }

    #[test]
    fn block_index_bounds() {
        assert!(BlockIndex::new(4, 2, 5).is_err());
        assert!(BlockIndex::new(0, 0, 5).is_err());
        assert_eq!(BlockIndex::new(3, 2, 5).unwrap().range(), 3..5);
    }
}
