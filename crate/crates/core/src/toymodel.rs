//! Synthetic multi-head causal attention used to generate calibration tensors.
//!
//! Blocks are stacked with the attention output of one block feeding the next
//! block's input directly; there is no MLP, normalization or residual stream.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlock<T> {
    /// Per-head query projections, each `d_h × d`.
    pub w_q: Vec<Matrix<T>>,
    pub w_k: Vec<Matrix<T>>,
    pub w_v: Vec<Matrix<T>>,
    /// Output projection, `d × (H·d_h)`.
    pub w_out: Matrix<T>,
}

/// Initialization gains for [`AttnBlock::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockInit {
    /// Std of query/key entries relative to `1/√d`; larger values sharpen attention.
    pub qk_gain: f64,
    /// Std of output-projection entries relative to `1/√(H·d_h)`.
    pub out_gain: f64,
}

impl Default for BlockInit {
    fn default() -> Self {
        Self {
            qk_gain: 1.0,
            out_gain: 1.0,
        }
    }
}

impl<T: Scalar> AttnBlock<T> {
    pub fn new(w_q: Vec<Matrix<T>>, w_k: Vec<Matrix<T>>, w_v: Vec<Matrix<T>>, w_out: Matrix<T>) -> Result<Self> {
        let block = Self { w_q, w_k, w_v, w_out };
        block.validate()?;
        Ok(block)
    }

    pub fn random(seed: u64, d: usize, d_h: usize, heads: usize, init: BlockInit) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_std = T::lit(1.0 / (d as f64).sqrt());
        let qk_std = T::lit(init.qk_gain) * in_std;
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        let mut w_v = Vec::with_capacity(heads);
        for _ in 0..heads {
            w_q.push(Matrix::random_normal(d_h, d, qk_std, &mut rng));
            w_k.push(Matrix::random_normal(d_h, d, qk_std, &mut rng));
            w_v.push(Matrix::random_normal(d_h, d, in_std, &mut rng));
        }
        let out_std = T::lit(init.out_gain / ((heads * d_h) as f64).sqrt());
        let w_out = Matrix::random_normal(d, heads * d_h, out_std, &mut rng);
        Self { w_q, w_k, w_v, w_out }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.first().map_or(0, Matrix::rows)
    }

    pub fn model_dim(&self) -> usize {
        self.w_out.rows()
    }

    /// `W_out,h`: the `d × d_h` column slice of the output projection.
    pub fn w_out_head(&self, h: usize) -> Matrix<T> {
        let d_h = self.head_dim();
        self.w_out.col_block(h * d_h, (h + 1) * d_h)
    }

    fn validate(&self) -> Result<()> {
        let heads = self.heads();
        let (d_h, d) = self.w_q.first().map_or((0, 0), Matrix::shape);
        if heads == 0 || d_h == 0 || d == 0 {
            return Err(Error::Validation("attention block needs at least one nonempty head".into()));
        }
        if self.w_k.len() != heads || self.w_v.len() != heads {
            return Err(shape_err("AttnBlock", format!("{heads} heads everywhere"), "ragged head lists"));
        }
        for m in self.w_q.iter().chain(&self.w_k).chain(&self.w_v) {
            if m.shape() != (d_h, d) {
                return Err(shape_err("AttnBlock", format!("{d_h}x{d} projections"), format!("{}x{}", m.rows(), m.cols())));
            }
        }
        if self.w_out.shape() != (d, heads * d_h) {
            return Err(shape_err(
                "AttnBlock",
                format!("{d}x{} output projection", heads * d_h),
                format!("{}x{}", self.w_out.rows(), self.w_out.cols()),
            ));
        }
        Ok(())
    }
}

/// Per-head tensors consumed by the curvature builders.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadContext<T> {
    /// `Q_h = (W_Q,h·X)ᵀ`, `L × d_h`.
    pub q: Matrix<T>,
    /// `K_h = (W_K,h·X)ᵀ`, `L × d_h`.
    pub k: Matrix<T>,
    /// Causal row-stochastic attention, `L × L`.
    pub a: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionContext<T> {
    pub heads: Vec<HeadContext<T>>,
}

/// Row-wise softmax of `logits` with entries above the diagonal masked out.
pub fn causal_softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let l = logits.rows();
    let mut a = Matrix::zeros(l, l);
    for i in 0..l {
        let row = &logits.row(i)[..=i];
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (j, e) in exps.into_iter().enumerate() {
            a[(i, j)] = e / total;
        }
    }
    a
}

fn head_attention<T: Scalar>(w_q: &Matrix<T>, w_k: &Matrix<T>, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let q = w_q.matmul(x)?.transpose();
    let k = w_k.matmul(x)?.transpose();
    let temp = T::one() / T::from_int(w_q.rows() as i64).sqrt();
    let logits = q.matmul_t(&k)?.scale(temp);
    Ok((q, k, causal_softmax(&logits)))
}

/// Causal attention with per-head query/key projections taken from `qk_source`
/// and value/output projections from `block`.
fn forward_mixed<T: Scalar>(qk_source: &AttnBlock<T>, block: &AttnBlock<T>, x: &Matrix<T>) -> Result<(AttentionContext<T>, Matrix<T>)> {
    block.validate()?;
    if x.rows() != block.model_dim() {
        return Err(shape_err("forward_attention", format!("{} input rows", block.model_dim()), format!("{}", x.rows())));
    }
    let mut out = Matrix::zeros(block.model_dim(), x.cols());
    let mut heads = Vec::with_capacity(block.heads());
    for h in 0..block.heads() {
        let (q, k, a) = head_attention(&qk_source.w_q[h], &qk_source.w_k[h], x)?;
        let v = block.w_v[h].matmul(x)?;
        let contrib = block.w_out_head(h).matmul(&v)?.matmul_t(&a)?;
        if !(q.is_finite() && k.is_finite() && a.is_finite() && contrib.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("attention head {h}"),
            });
        }
        out = out.add(&contrib)?;
        heads.push(HeadContext { q, k, a });
    }
    Ok((AttentionContext { heads }, out))
}

/// `output = Σ_h W_out,h·(W_V,h·X)·A_hᵀ` with `A_h = causal_softmax(Q_h·K_hᵀ/√d_h)`.
pub fn forward_attention<T: Scalar>(block: &AttnBlock<T>, x: &Matrix<T>) -> Result<(AttentionContext<T>, Matrix<T>)> {
    forward_mixed(block, block, x)
}

/// Attention context computed with the query/key projections of `qk_source`.
pub fn attention_context<T: Scalar>(qk_source: &AttnBlock<T>, x: &Matrix<T>) -> Result<AttentionContext<T>> {
    forward_mixed(qk_source, qk_source, x).map(|(ctx, _)| ctx)
}

/// `‖G·ΔW·X‖²_F`.
pub fn attention_recon_error<T: Scalar>(g: &Matrix<T>, delta_w: &Matrix<T>, x: &Matrix<T>) -> Result<T> {
    Ok(g.matmul(delta_w)?.matmul(x)?.frobenius_sq())
}

/// Unit-Gaussian `d × L` activations with `outlier_channels` rows scaled by
/// `outlier_gain`. Deterministic in `seed`.
pub fn gen_calibration<T: Scalar>(seed: u64, d: usize, l: usize, outlier_channels: usize, outlier_gain: f64) -> Result<Matrix<T>> {
    if outlier_channels > d {
        return Err(Error::Validation(format!("{outlier_channels} outlier channels exceed d = {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::random_normal(d, l, T::one(), &mut rng);
    let gain = T::lit(outlier_gain);
    for ch in sample(&mut rng, d, outlier_channels).iter() {
        x.row_mut(ch).iter_mut().for_each(|v| *v *= gain);
    }
    Ok(x)
}

/// Layer input under the partially quantized model together with its
/// full-precision counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBundle<T> {
    pub x: Matrix<T>,
    pub x_tilde: Matrix<T>,
    pub alpha: T,
    /// `α·(X − X̃)·Xᵀ`.
    pub r: Matrix<T>,
}

impl<T: Scalar> CalibrationBundle<T> {
    pub fn new(x: Matrix<T>, x_tilde: Matrix<T>, alpha: T) -> Result<Self> {
        if alpha < T::zero() {
            return Err(Error::Validation("alpha must be nonnegative".into()));
        }
        let r = x.sub(&x_tilde)?.matmul_t(&x)?.scale(alpha);
        Ok(Self { x, x_tilde, alpha, r })
    }

    /// Bundle for an input with no inherited deviation.
    pub fn clean(x: Matrix<T>, alpha: T) -> Result<Self> {
        Self::new(x.clone(), x, alpha)
    }

    /// `ΔX = X − X̃`.
    pub fn deviation(&self) -> Matrix<T> {
        self.x.sub(&self.x_tilde).expect("bundle shapes")
    }

    /// Effective input of a value projection: both `X` and `X̃` right-multiplied by `Aᵀ`.
    pub fn through_attention(&self, a: &Matrix<T>) -> Result<Self> {
        Self::new(self.x.matmul_t(a)?, self.x_tilde.matmul_t(a)?, self.alpha)
    }
}

/// Result of running a block stack with per-block quantization.
#[derive(Debug, Clone)]
pub struct Propagation<T, R> {
    pub bundles: Vec<CalibrationBundle<T>>,
    pub quantized: Vec<AttnBlock<T>>,
    /// Whatever the quantizer reported per block.
    pub reports: Vec<R>,
    /// Mean squared deviation of the final output from the full-precision stack.
    pub deviation: T,
}

/// Runs the FP stack to record `X̃` per block, then quantizes blocks in order,
/// feeding each quantized block's output to the next. The quantizer receives
/// the block index, the FP block, the FP-weight attention context on the
/// quantized input, and the calibration bundle.
pub fn propagate_blocks<T, R, F>(blocks: &[AttnBlock<T>], x0: &Matrix<T>, alpha: T, mut quantizer: F) -> Result<Propagation<T, R>>
where
    T: Scalar,
    F: FnMut(usize, &AttnBlock<T>, &AttentionContext<T>, &CalibrationBundle<T>) -> Result<(AttnBlock<T>, R)>,
{
    if blocks.is_empty() {
        return Err(Error::Validation("need at least one block".into()));
    }
    let mut fp_inputs = Vec::with_capacity(blocks.len() + 1);
    fp_inputs.push(x0.clone());
    for block in blocks {
        let (_, out) = forward_attention(block, fp_inputs.last().expect("nonempty"))?;
        fp_inputs.push(out);
    }

    let mut x = x0.clone();
    let mut bundles = Vec::with_capacity(blocks.len());
    let mut quantized = Vec::with_capacity(blocks.len());
    let mut reports = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let bundle = CalibrationBundle::new(x.clone(), fp_inputs[i].clone(), alpha)?;
        let ctx = attention_context(block, &x)?;
        let (qblock, report) = quantizer(i, block, &ctx, &bundle)?;
        let (_, out) = forward_attention(&qblock, &x)?;
        x = out;
        bundles.push(bundle);
        quantized.push(qblock);
        reports.push(report);
    }
    let fp_out = fp_inputs.last().expect("nonempty");
    let n = T::from_int((x.rows() * x.cols()) as i64);
    let deviation = x.sub(fp_out)?.frobenius_sq() / n;
    Ok(Propagation {
        bundles,
        quantized,
        reports,
        deviation,
    })
}
