//! Pruning masks and uniform weight quantization.

pub mod prune;
pub mod quant;

pub use prune::{apply_mask, compute_mask, materialize, PruneSpec, PruningMask, Scope, Score, Structure};
pub use quant::{
    calibrate_quant, quantize_tensor, quantize_weights, ste_quantize, Granularity, QuantPlan, QuantSpec,
};
