//! Certified training under compression.
//!
//! The crate trains small classifiers so that interval certificates
//! (robustness within an L∞ ball) survive pruning and quantization:
//! a reverse-mode [`tensor`] layer, [`network`] definitions, interval
//! [`bounds`], input and weight [`attack`]s, [`compress`]ion, and the
//! [`train`]ing loop.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attack;
pub mod bounds;
pub mod checkpoint;
pub mod compress;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod tensor;
pub mod train;

pub use attack::{AttackConfig, AwpConfig, PerturbationScale, WeightPerturbation};
pub use bounds::{certify, ibp_forward, ibp_loss, InputBox, IntervalTensor, Verdict};
pub use checkpoint::Checkpoint;
pub use compress::{Granularity, PruneSpec, PruningMask, QuantPlan, QuantSpec};
pub use data::{Dataset, Split};
pub use error::{Error, IdxError, Result};
pub use eval::{evaluate, EvalReport, Variant};
pub use network::{Architecture, LayerSpec, Mode, NetView, Network, ParamId, ParamRole};
pub use tensor::{Tape, Tensor, Var};
pub use train::{CompressionSet, TrainConfig, TrainState};
