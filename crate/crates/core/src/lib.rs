//! Attention-aware post-training quantization of transformer projection
//! weights under a Kronecker-factored curvature model.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! and `*32` aliases below pin the common cases.

// Checks like `!(x > 0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compensate;
pub mod curvature;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod matrix;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod pipeline;
pub mod refine;
pub mod scalar;
pub mod toymodel;

pub use compensate::{
    gptaq_p_matrix, gptaq_quantize, gptq_column_step, gptq_quantize, joint_compensate, joint_compensate_residual, BlockIndex,
    ResidualInfo,
};
pub use curvature::{
    build_hessian_key, build_hessian_query, build_hessian_value, chol_inv_upper, dampen, CholFactors, KronHessian, DEFAULT_DAMPING,
};
pub use error::{Error, Result};
pub use grid::{default_candidates, init_scales_for_block, round_to_grid, QuantGrid, QuantResult, RangeMode};
pub use linalg::Cholesky;
pub use matrix::{IntMatrix, Matrix};
pub use pipeline::{
    evaluate_losses, quantize_attention, quantize_layer, quantize_stack, AttentionReport, LayerKind, LayerReport, PipelineConfig,
    StackReport,
};
pub use refine::RefineState;
pub use scalar::Scalar;
pub use toymodel::{
    attention_recon_error, forward_attention, gen_calibration, propagate_blocks, AttentionContext, AttnBlock, BlockInit,
    CalibrationBundle, HeadContext,
};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type KronHessian64 = KronHessian<f64>;
pub type KronHessian32 = KronHessian<f32>;
pub type QuantGrid64 = QuantGrid<f64>;
pub type QuantGrid32 = QuantGrid<f32>;
pub type QuantResult64 = QuantResult<f64>;
pub type QuantResult32 = QuantResult<f32>;
pub type PipelineConfig64 = PipelineConfig<f64>;
pub type PipelineConfig32 = PipelineConfig<f32>;
pub type AttnBlock64 = AttnBlock<f64>;
pub type AttnBlock32 = AttnBlock<f32>;
