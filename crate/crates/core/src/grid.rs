//! Per-out-channel uniform quantization grid.
//!
//! `signed_symmetric` codes live in `[−2^{b−1}, 2^{b−1}−1]` with zero offsets, so
//! `Q = diag(s)·W_int` holds verbatim. `unsigned` codes live in `[0, 2^b−1]` with
//! a per-channel zero point and every formula that consumes integer weights uses
//! the centered codes `V = W_int − z·1ᵀ` instead.

use crate::error::{shape_err, Error, Result};
use crate::matrix::{IntMatrix, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RangeMode {
    #[default]
    SignedSymmetric,
    Unsigned,
}

impl RangeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RangeMode::SignedSymmetric => "signed_symmetric",
            RangeMode::Unsigned => "unsigned",
        }
    }
}

impl std::str::FromStr for RangeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed_symmetric" => Ok(RangeMode::SignedSymmetric),
            "unsigned" => Ok(RangeMode::Unsigned),
            other => Err(Error::Validation(format!("unknown range mode {other:?}"))),
        }
    }
}

/// Clipping ratios `0.70, 0.75, …, 1.00`.
pub fn default_candidates<T: Scalar>() -> Vec<T> {
    (0..=6).map(|k| T::lit((70 + 5 * k) as f64 / 100.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrid<T> {
    pub scales: Vec<T>,
    pub bits: u32,
    pub range_mode: RangeMode,
    pub zero_points: Vec<i32>,
}

pub fn validate_bits(bits: u32) -> Result<()> {
    if !(2..=24).contains(&bits) {
        return Err(Error::Validation(format!("bit-width {bits} outside 2..=24")));
    }
    Ok(())
}

/// Inclusive integer code range for a bit-width and range mode.
pub fn code_range(bits: u32, mode: RangeMode) -> (i32, i32) {
    match mode {
        RangeMode::SignedSymmetric => (-(1 << (bits - 1)), (1 << (bits - 1)) - 1),
        RangeMode::Unsigned => (0, (1 << bits) - 1),
    }
}

impl<T: Scalar> QuantGrid<T> {
    pub fn new(scales: Vec<T>, bits: u32, range_mode: RangeMode, zero_points: Vec<i32>) -> Result<Self> {
        validate_bits(bits)?;
        if zero_points.len() != scales.len() {
            return Err(shape_err(
                "QuantGrid::new",
                format!("{} zero points", scales.len()),
                format!("{}", zero_points.len()),
            ));
        }
        if range_mode == RangeMode::SignedSymmetric && zero_points.iter().any(|&z| z != 0) {
            return Err(Error::Validation("signed_symmetric grids carry zero offsets".into()));
        }
        let grid = Self {
            scales,
            bits,
            range_mode,
            zero_points,
        };
        grid.check_scales()?;
        Ok(grid)
    }

    /// Signed-symmetric grid with the given scales.
    pub fn symmetric(scales: Vec<T>, bits: u32) -> Result<Self> {
        let n = scales.len();
        Self::new(scales, bits, RangeMode::SignedSymmetric, vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.bits, self.range_mode)
    }

    fn check_scales(&self) -> Result<()> {
        match self.scales.iter().position(|&s| !(s > T::zero()) || !s.is_finite()) {
            Some(i) => Err(Error::Validation(format!(
                "scale for channel {i} must be positive and finite, got {}",
                self.scales[i]
            ))),
            None => Ok(()),
        }
    }

    /// Integer code for `w` on channel `row` (ties to even, then clamped).
    #[inline]
    pub fn quantize(&self, w: T, row: usize) -> i32 {
        let (lo, hi) = self.code_range();
        let r = (w / self.scales[row]).round_half_even();
        let shifted = r + T::from_int(self.zero_points[row] as i64);
        let clamped = shifted.max(T::from_int(lo as i64)).min(T::from_int(hi as i64));
        clamped.to_i32().unwrap_or(0)
    }

    /// `s_row · (code − z_row)`; the single dequantization path in the crate.
    #[inline]
    pub fn dequantize(&self, code: i32, row: usize) -> T {
        self.scales[row] * T::from_int(code as i64 - self.zero_points[row] as i64)
    }

    /// Centered code `code − z_row` as a real number.
    #[inline]
    pub fn centered(&self, code: i32, row: usize) -> T {
        T::from_int(code as i64 - self.zero_points[row] as i64)
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            scales: self.scales[range.clone()].to_vec(),
            bits: self.bits,
            range_mode: self.range_mode,
            zero_points: self.zero_points[range].to_vec(),
        }
    }

    /// Overwrites channels `start..start+block.len()` with `block`.
    pub fn set_block(&mut self, start: usize, block: &Self) {
        let end = start + block.len();
        self.scales[start..end].copy_from_slice(&block.scales);
        self.zero_points[start..end].copy_from_slice(&block.zero_points);
    }

    pub fn dequantize_matrix(&self, w_int: &IntMatrix) -> Matrix<T> {
        Matrix::from_fn(w_int.rows(), w_int.cols(), |i, j| self.dequantize(w_int[(i, j)], i))
    }

    /// `V = W_int − z·1ᵀ` as a real matrix.
    pub fn centered_matrix(&self, w_int: &IntMatrix) -> Matrix<T> {
        Matrix::from_fn(w_int.rows(), w_int.cols(), |i, j| self.centered(w_int[(i, j)], i))
    }
}

/// Quantizes every row of `w_rows` on its channel of `grid`.
pub fn round_to_grid<T: Scalar>(w_rows: &Matrix<T>, grid: &QuantGrid<T>) -> Result<(IntMatrix, Matrix<T>)> {
    if w_rows.rows() != grid.len() {
        return Err(shape_err(
            "round_to_grid",
            format!("{} rows", grid.len()),
            format!("{}", w_rows.rows()),
        ));
    }
    grid.check_scales()?;
    let codes = IntMatrix::from_fn(w_rows.rows(), w_rows.cols(), |i, j| grid.quantize(w_rows[(i, j)], i));
    let q = grid.dequantize_matrix(&codes);
    Ok((codes, q))
}

/// Quantized weights with their grid. `q` is always rebuilt from `w_int`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult<T> {
    pub w_int: IntMatrix,
    pub grid: QuantGrid<T>,
    pub q: Matrix<T>,
}

impl<T: Scalar> QuantResult<T> {
    pub fn new(w_int: IntMatrix, grid: QuantGrid<T>) -> Self {
        let q = grid.dequantize_matrix(&w_int);
        Self { w_int, grid, q }
    }
}

/// Scale and zero point for one row at clipping ratio `gamma`.
fn candidate_params<T: Scalar>(row: &[T], gamma: T, bits: u32, mode: RangeMode) -> Option<(T, i32)> {
    match mode {
        RangeMode::SignedSymmetric => {
            let max_abs = row.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
            if max_abs == T::zero() {
                return None;
            }
            let q_max = T::from_int(((1i64) << (bits - 1)) - 1);
            Some((gamma * max_abs / q_max, 0))
        }
        RangeMode::Unsigned => {
            let lo = row.iter().fold(T::zero(), |m, &v| m.min(v)) * gamma;
            let hi = row.iter().fold(T::zero(), |m, &v| m.max(v)) * gamma;
            if hi == lo {
                return None;
            }
            let levels = T::from_int(((1i64) << bits) - 1);
            let s = (hi - lo) / levels;
            let z = (-lo / s).round_half_even().max(T::zero()).min(levels);
            Some((s, z.to_i32().unwrap_or(0)))
        }
    }
}

/// `Δw · H · Δwᵀ` for a single row.
fn weighted_row_error<T: Scalar>(delta: &[T], h: &Matrix<T>) -> T {
    let mut acc = T::zero();
    for (i, &di) in delta.iter().enumerate() {
        if di == T::zero() {
            continue;
        }
        let hrow = h.row(i);
        let inner: T = delta.iter().zip(hrow).fold(T::zero(), |a, (&dj, &hij)| a + dj * hij);
        acc += di * inner;
    }
    acc
}

/// Rounding error of `row` on a single-channel grid, weighted by `h_in`.
pub fn row_rounding_loss<T: Scalar>(row: &[T], scale: T, zero_point: i32, bits: u32, mode: RangeMode, h_in: &Matrix<T>) -> T {
    let grid = QuantGrid {
        scales: vec![scale],
        bits,
        range_mode: mode,
        zero_points: vec![zero_point],
    };
    let delta: Vec<T> = row.iter().map(|&w| grid.dequantize(grid.quantize(w, 0), 0) - w).collect();
    weighted_row_error(&delta, h_in)
}

/// Row-wise scale search minimizing `tr(ΔW·H_in·ΔWᵀ)` over clipping ratios.
///
/// Candidates are scanned from the largest ratio down and only a strictly
/// smaller loss replaces the incumbent, so ties resolve toward the larger ratio.
/// All-zero rows get scale 1 and zero point 0.
pub fn init_scales_for_block<T: Scalar>(
    w_block: &Matrix<T>,
    h_in: &Matrix<T>,
    bits: u32,
    candidates: &[T],
    mode: RangeMode,
) -> Result<QuantGrid<T>> {
    validate_bits(bits)?;
    if w_block.rows() == 0 {
        return Err(Error::Validation("scale search needs at least one row".into()));
    }
    if candidates.is_empty() || candidates.iter().any(|&g| !(g > T::zero() && g <= T::one())) {
        return Err(Error::Validation("clipping ratios must be nonempty and lie in (0, 1]".into()));
    }
    if h_in.shape() != (w_block.cols(), w_block.cols()) {
        return Err(shape_err(
            "init_scales_for_block",
            format!("{0}x{0} h_in", w_block.cols()),
            format!("{}x{}", h_in.rows(), h_in.cols()),
        ));
    }
    let mut order: Vec<T> = candidates.to_vec();
    order.sort_by(|a, b| b.partial_cmp(a).expect("finite ratios"));

    let mut scales = Vec::with_capacity(w_block.rows());
    let mut zero_points = Vec::with_capacity(w_block.rows());
    for i in 0..w_block.rows() {
        let row = w_block.row(i);
        let mut best: Option<(T, T, i32)> = None;
        for &gamma in &order {
            let Some((s, z)) = candidate_params(row, gamma, bits, mode) else {
                break;
            };
            let loss = row_rounding_loss(row, s, z, bits, mode, h_in);
            if best.is_none_or(|(l, _, _)| loss < l) {
                best = Some((loss, s, z));
            }
        }
        let (s, z) = best.map_or((T::one(), 0), |(_, s, z)| (s, z));
        scales.push(s);
        zero_points.push(z);
    }
    QuantGrid::new(scales, bits, mode, zero_points)
}
