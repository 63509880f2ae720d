//! End-to-end quantization of one projection layer and of whole attention blocks.

use std::fmt;
use std::time::{Duration, Instant};

use crate::compensate::{gptaq_quantize, joint_compensate, joint_compensate_residual, BlockIndex, ResidualInfo};
use crate::curvature::{build_hessian_key, build_hessian_query, build_hessian_value, CholFactors, KronHessian, DEFAULT_DAMPING};
use crate::error::{shape_err, Error, Result};
use crate::grid::{default_candidates, init_scales_for_block, validate_bits, QuantGrid, QuantResult, RangeMode};
use crate::matrix::{IntMatrix, Matrix};
use crate::refine::RefineState;
use crate::scalar::Scalar;
use crate::toymodel::{attention_context, propagate_blocks, AttentionContext, AttnBlock, CalibrationBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig<T> {
    pub bits: u32,
    /// Out-channels quantized per sequential step (`N`).
    pub block_size: usize,
    /// Weight of the inherited-deviation term.
    pub alpha: T,
    /// Coordinate-descent sweeps over the scales.
    pub cd_iters: usize,
    /// Damping as a fraction of the mean Hessian diagonal.
    pub damping: T,
    pub candidates: Vec<T>,
    pub range_mode: RangeMode,
    /// Carry the inherited input deviation through both compensation stages.
    pub residual: bool,
    /// Per-block scale search plus coordinate-descent scale refinement.
    pub grid_refine: bool,
    /// Build value-layer attention from the already quantized query/key weights.
    pub value_attention_from_quantized: bool,
}

impl<T: Scalar> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            bits: 2,
            block_size: 4,
            alpha: T::lit(0.25),
            cd_iters: 1,
            damping: T::lit(DEFAULT_DAMPING),
            candidates: default_candidates(),
            range_mode: RangeMode::SignedSymmetric,
            residual: true,
            grid_refine: true,
            value_attention_from_quantized: false,
        }
    }
}

impl<T: Scalar> PipelineConfig<T> {
    pub fn validate(&self) -> Result<()> {
        validate_bits(self.bits)?;
        if self.block_size == 0 {
            return Err(Error::Validation("block_size must be at least 1".into()));
        }
        if !(self.alpha >= T::zero()) {
            return Err(Error::Validation("alpha must be nonnegative".into()));
        }
        if !(self.damping >= T::zero()) {
            return Err(Error::Validation("damping must be nonnegative".into()));
        }
        if self.candidates.is_empty() || self.candidates.iter().any(|&g| !(g > T::zero() && g <= T::one())) {
            return Err(Error::Validation("clipping ratios must be nonempty and lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Query,
    Key,
    Value,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::Query, LayerKind::Key, LayerKind::Value];
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Query => "q",
            LayerKind::Key => "k",
            LayerKind::Value => "v",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport<T> {
    pub sequential_steps: usize,
    /// Losses before scale refinement.
    pub loss_layer_pre: T,
    pub loss_attn_pre: T,
    /// `‖ΔW·X‖²_F`.
    pub loss_layer: T,
    /// `‖G·(Q·X − W·X̃)‖²_F` including the inherited deviation.
    pub loss_attn: T,
    /// Time spent in the block loop only.
    pub wall_time: Duration,
}

/// Layer-wise and attention-wise reconstruction losses of `q` against `w`.
///
/// `hess` must be the undamped curvature of `bundle.x`. The attention-wise
/// loss includes the inherited-deviation terms, independent of `bundle.alpha`.
pub fn evaluate_losses<T: Scalar>(w: &Matrix<T>, q: &Matrix<T>, hess: &KronHessian<T>, bundle: &CalibrationBundle<T>) -> Result<(T, T)> {
    let dw = q.sub(w)?;
    let dw_h_in = dw.matmul(&hess.h_in)?;
    let loss_layer = dw_h_in.frobenius_dot(&dw);
    let quad = hess.h_out.matmul(&dw)?.frobenius_dot(&dw_h_in);
    let dx = bundle.deviation();
    if dx.max_abs() == T::zero() {
        return Ok((loss_layer, quad));
    }
    // ‖G(ΔW·X + W·ΔX)‖² = quad + 2⟨H_out·ΔW, W·ΔX·Xᵀ⟩ + ⟨H_out·W, W·ΔX·ΔXᵀ⟩
    let h_out_dw = hess.h_out.matmul(&dw)?;
    let cross = h_out_dw.frobenius_dot(&w.matmul(&dx.matmul_t(&bundle.x)?)?);
    let constant = hess.h_out.matmul(w)?.frobenius_dot(&w.matmul(&dx.gram_rows())?);
    Ok((loss_layer, quad + T::lit(2.0) * cross + constant))
}

/// Quantizes one projection `w` (`d_out × d_in`) under curvature `hess`
/// (undamped, built from `bundle.x`).
pub fn quantize_layer<T: Scalar>(
    w: &Matrix<T>,
    hess: &KronHessian<T>,
    bundle: &CalibrationBundle<T>,
    cfg: &PipelineConfig<T>,
) -> Result<(QuantResult<T>, LayerReport<T>)> {
    const OP: &str = "quantize_layer";
    cfg.validate()?;
    let (d_out, d_in) = w.shape();
    if hess.d_out() != d_out || hess.d_in() != d_in {
        return Err(shape_err(
            OP,
            format!("{d_out}x{d_out} and {d_in}x{d_in} curvature"),
            format!("{0}x{0} and {1}x{1}", hess.d_out(), hess.d_in()),
        ));
    }
    if bundle.x.rows() != d_in {
        return Err(shape_err(OP, format!("{d_in} input channels"), format!("{}", bundle.x.rows())));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite { context: "input weights".into() });
    }

    let damped = hess.damped(cfg.damping);
    let factors = CholFactors::from_hessian(&damped)?;
    let res = if cfg.residual {
        ResidualInfo::new(bundle.r.clone(), &damped.h_in, bundle.alpha)?
    } else {
        ResidualInfo::zero(&damped.h_in)?
    };

    let mut grid = if cfg.grid_refine {
        QuantGrid::new(vec![T::one(); d_out], cfg.bits, cfg.range_mode, vec![0; d_out])?
    } else {
        init_scales_for_block(w, &hess.h_in, cfg.bits, &cfg.candidates, cfg.range_mode)?
    };
    let mut work = w.clone();
    let mut w_int = IntMatrix::filled(d_out, d_in, 0);
    let mut steps = 0;

    let started = Instant::now();
    for start in (0..d_out).step_by(cfg.block_size) {
        let block = BlockIndex::new(start, cfg.block_size.min(d_out - start), d_out)?;
        let w_b = work.row_block(block.start, block.end());
        let grid_b = if cfg.grid_refine {
            let g = init_scales_for_block(&w_b, &hess.h_in, cfg.bits, &cfg.candidates, cfg.range_mode)?;
            grid.set_block(block.start, &g);
            g
        } else {
            grid.slice(block.range())
        };
        let (q_b, codes) = gptaq_quantize(&w_b, &factors.u_in, &res.r, &grid_b)?;
        if !q_b.is_finite() {
            return Err(Error::NonFinite {
                context: format!("quantized rows {}..{}", block.start, block.end()),
            });
        }
        for (i, row) in block.range().enumerate() {
            w_int.row_mut(row).copy_from_slice(codes.row(i));
        }
        if block.end() < d_out {
            let delta = if cfg.residual {
                joint_compensate_residual(&w_b, &q_b, &factors.u_out, block, &res)?
            } else {
                joint_compensate(&w_b, &q_b, &factors.u_out, block)?
            };
            let rest = work.row_block(block.end(), d_out).add(&delta)?;
            if !rest.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("compensation after rows {}..{}", block.start, block.end()),
                });
            }
            work.set_row_block(block.end(), &rest);
        }
        steps += 1;
    }
    let wall_time = started.elapsed();

    let pre = QuantResult::new(w_int, grid);
    let (loss_layer_pre, loss_attn_pre) = evaluate_losses(w, &pre.q, hess, bundle)?;
    let result = if cfg.grid_refine && cfg.cd_iters > 0 {
        let r = if cfg.residual { bundle.r.clone() } else { Matrix::zeros(d_in, d_in) };
        let mut state = RefineState::new(w.clone(), pre.w_int, pre.grid, hess.h_in.clone(), hess.h_out.clone(), r)?;
        state.refine_scales(cfg.cd_iters);
        let (w_int, grid) = state.into_parts();
        QuantResult::new(w_int, grid)
    } else {
        pre
    };
    let (loss_layer, loss_attn) = evaluate_losses(w, &result.q, hess, bundle)?;
    let report = LayerReport {
        sequential_steps: steps,
        loss_layer_pre,
        loss_attn_pre,
        loss_layer,
        loss_attn,
        wall_time,
    };
    Ok((result, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadReport<T> {
    pub kind: LayerKind,
    pub head: usize,
    pub report: LayerReport<T>,
}

/// Per-layer reports in `(kind, head)` order: all query heads, then keys, then values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionReport<T> {
    pub layers: Vec<HeadReport<T>>,
}

impl<T: Scalar> AttentionReport<T> {
    fn total(&self, f: impl Fn(&LayerReport<T>) -> T) -> T {
        self.layers.iter().map(|l| f(&l.report)).sum()
    }

    pub fn loss_layer(&self) -> T {
        self.total(|r| r.loss_layer)
    }

    pub fn loss_attn(&self) -> T {
        self.total(|r| r.loss_attn)
    }

    pub fn loss_attn_pre(&self) -> T {
        self.total(|r| r.loss_attn_pre)
    }

    pub fn wall_time(&self) -> Duration {
        self.layers.iter().map(|l| l.report.wall_time).sum()
    }

    pub fn sequential_steps(&self) -> usize {
        self.layers.iter().map(|l| l.report.sequential_steps).sum()
    }
}

/// Quantizes the query, key and value projections of every head. The output
/// projection stays in full precision. `ctx` must be the full-precision
/// attention context on `bundle.x`.
pub fn quantize_attention<T: Scalar>(
    block: &AttnBlock<T>,
    ctx: &AttentionContext<T>,
    bundle: &CalibrationBundle<T>,
    cfg: &PipelineConfig<T>,
) -> Result<(AttnBlock<T>, AttentionReport<T>)> {
    if ctx.heads.len() != block.heads() {
        return Err(shape_err("quantize_attention", format!("{} head contexts", block.heads()), format!("{}", ctx.heads.len())));
    }
    let mut out = block.clone();
    let mut report = AttentionReport::default();
    for h in 0..block.heads() {
        let hess = build_hessian_query(&bundle.x, &ctx.heads[h].k)?;
        let (res, rep) = quantize_layer(&block.w_q[h], &hess, bundle, cfg)?;
        out.w_q[h] = res.q;
        report.layers.push(HeadReport { kind: LayerKind::Query, head: h, report: rep });
    }
    for h in 0..block.heads() {
        let hess = build_hessian_key(&bundle.x, &ctx.heads[h].q)?;
        let (res, rep) = quantize_layer(&block.w_k[h], &hess, bundle, cfg)?;
        out.w_k[h] = res.q;
        report.layers.push(HeadReport { kind: LayerKind::Key, head: h, report: rep });
    }
    let quantized_ctx;
    let value_ctx = if cfg.value_attention_from_quantized {
        quantized_ctx = attention_context(&out, &bundle.x)?;
        &quantized_ctx
    } else {
        ctx
    };
    for h in 0..block.heads() {
        let a = &value_ctx.heads[h].a;
        let hess = build_hessian_value(&bundle.x, a, &block.w_out_head(h))?;
        let value_bundle = bundle.through_attention(a)?;
        let (res, rep) = quantize_layer(&block.w_v[h], &hess, &value_bundle, cfg)?;
        out.w_v[h] = res.q;
        report.layers.push(HeadReport { kind: LayerKind::Value, head: h, report: rep });
    }
    Ok((out, report))
}

#[derive(Debug, Clone)]
pub struct StackReport<T> {
    pub blocks: Vec<AttentionReport<T>>,
    /// Mean squared deviation of the final output from the full-precision stack.
    pub deviation: T,
    pub quantized: Vec<AttnBlock<T>>,
}

/// Quantizes a stack of attention blocks in order, each calibrated on the
/// output of the already quantized blocks before it.
pub fn quantize_stack<T: Scalar>(blocks: &[AttnBlock<T>], x0: &Matrix<T>, cfg: &PipelineConfig<T>) -> Result<StackReport<T>> {
    cfg.validate()?;
    let prop = propagate_blocks(blocks, x0, cfg.alpha, |_, block, ctx, bundle| quantize_attention(block, ctx, bundle, cfg))?;
    Ok(StackReport {
        blocks: prop.reports,
        deviation: prop.deviation,
        quantized: prop.quantized,
    })
}
