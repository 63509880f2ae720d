#![allow(dead_code)]

use kronquant::{dampen, Matrix};
use rand::Rng;

/// Damped Gram matrix of a random `n × 2n` sample.
pub fn random_spd<R: Rng>(n: usize, rng: &mut R) -> Matrix<f64> {
    let b = Matrix::<f64>::random_normal(n, 2 * n, 1.0, rng);
    dampen(&b.gram_rows(), 0.01)
}

pub fn rel_frobenius(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.sub(b).unwrap().frobenius() / b.frobenius().max(1e-300)
}

pub fn to_na(m: &Matrix<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &nalgebra::DMatrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn inverse(m: &Matrix<f64>) -> Matrix<f64> {
    from_na(&to_na(m).try_inverse().expect("invertible"))
}
