//! Cholesky factorization and triangular solves.

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Lower Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(shape_err(
                "cholesky",
                "square matrix",
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: d.to_f64_lossy(),
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn lower(&self) -> &Matrix<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `A·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        forward_subst(&self.l, b);
        backward_subst_transposed(&self.l, b);
    }

    /// `A⁻¹` via `n` solves against unit vectors, symmetrized.
    pub fn inverse(&self) -> Matrix<T> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            self.solve_in_place(&mut e);
            for i in 0..n {
                inv[(i, j)] = e[i];
            }
        }
        inv.symmetrize()
    }

    /// `M·A⁻¹` for a row-major `M`; `A` is symmetric so each row is one solve.
    pub fn right_solve(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        if m.cols() != self.dim() {
            return Err(shape_err(
                "Cholesky::right_solve",
                format!("{} columns", self.dim()),
                format!("{}", m.cols()),
            ));
        }
        let mut out = m.clone();
        for i in 0..out.rows() {
            self.solve_in_place(out.row_mut(i));
        }
        Ok(out)
    }
}

/// Solves `L·x = b` for lower-triangular `L`, overwriting `b`.
fn forward_subst<T: Scalar>(l: &Matrix<T>, b: &mut [T]) {
    for i in 0..b.len() {
        let mut s = b[i];
        let row = l.row(i);
        for k in 0..i {
            s -= row[k] * b[k];
        }
        b[i] = s / row[i];
    }
}

/// Solves `Lᵀ·x = b` for lower-triangular `L`, overwriting `b`.
fn backward_subst_transposed<T: Scalar>(l: &Matrix<T>, b: &mut [T]) {
    let n = b.len();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `L·X = B` for lower-triangular `L` and a matrix right-hand side.
pub fn solve_lower_triangular<T: Scalar>(
    l: &Matrix<T>,
    b: &Matrix<T>,
    op: &'static str,
) -> Result<Matrix<T>> {
    let n = l.rows();
    if !l.is_square() || b.rows() != n {
        return Err(shape_err(
            op,
            format!("{n}x{n} factor and {n}-row rhs"),
            format!("{}x{} factor, {}-row rhs", l.rows(), l.cols(), b.rows()),
        ));
    }
    let mut x = b.clone();
    let cols = b.cols();
    for i in 0..n {
        let d = l[(i, i)];
        if d == T::zero() || !d.is_finite() {
            return Err(Error::Singular {
                op,
                index: i,
                value: d.to_f64_lossy(),
            });
        }
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == T::zero() {
                continue;
            }
            for c in 0..cols {
                let v = x[(k, c)];
                x[(i, c)] -= lik * v;
            }
        }
        for c in 0..cols {
            x[(i, c)] /= d;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_spd(n: usize, seed: u64) -> Matrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::<f64>::random_normal(n, n + 3, 1.0, &mut rng);
        a.gram_rows().add(&Matrix::identity(n).scale(0.1)).unwrap()
    }

    #[test]
    fn factor_reconstructs() {
        let a = random_spd(9, 1);
        let c = Cholesky::factor(&a).unwrap();
        let rec = c.lower().matmul_t(c.lower()).unwrap();
        assert!(rec.rel_diff(&a, 1e-300) < 1e-13);
    }

    #[test]
    fn inverse_and_right_solve() {
        let a = random_spd(7, 2);
        let c = Cholesky::factor(&a).unwrap();
        let inv = c.inverse();
        let eye = a.matmul(&inv).unwrap();
        assert!(eye.rel_diff(&Matrix::identity(7), 1.0) < 1e-12);
        let m = Matrix::from_fn(3, 7, |i, j| (i as f64) - 0.5 * j as f64);
        let rs = c.right_solve(&m).unwrap();
        assert!(rs.rel_diff(&m.matmul(&inv).unwrap(), 1e-300) < 1e-12);
    }

    #[test]
    fn reports_failing_pivot() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, -1.0]]);
        match Cholesky::factor(&a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn lower_solve_matches_multiply() {
        let a = random_spd(5, 4);
        let l = Cholesky::factor(&a).unwrap().lower().clone();
        let b = Matrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64);
        let x = solve_lower_triangular(&l, &b, "test").unwrap();
        assert!(l.matmul(&x).unwrap().rel_diff(&b, 1e-300) < 1e-13);
        let mut sing = l.clone();
        sing[(3, 3)] = 0.0;
        assert!(matches!(
            solve_lower_triangular(&sing, &b, "test"),
            Err(Error::Singular { index: 3, .. })
        ));
    }
}
