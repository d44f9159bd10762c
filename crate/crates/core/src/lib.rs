//! Sparse-keyframe video object detection with flow-guided feature
//! propagation and iterative quality-weighted feature aggregation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense `(C, H, W)` tensors, 2-D convolution, and a small
//!   binary fixture format.
//! * [`warp`] — differentiable bilinear warping of feature maps along a
//!   displacement field, plus per-position rescaling.
//! * [`nets`] — the four small convolutional networks (feature, flow,
//!   quality, task) as explicit layer stacks with save/load support.
//! * [`fusion`] — quality-weighted two-way feature fusion and the running
//!   aggregate ("impression") update, including a symbolic tool that
//!   expands how much each past keyframe contributes to the current
//!   task feature.
//! * [`autodiff`] — a tape of the handful of composite ops used in
//!   training, with exact reverse-mode gradients.
//! * [`train`] — triplet sampling from synthetic clips, the training
//!   graph, detection losses, and a plain SGD loop.
//! * [`synth`] — deterministic synthetic scene rendering, degradations,
//!   and ground-truth displacement fields.
//! * [`eval`] — detection decoding, IoU, and mean average precision.
//! * [`pipeline`] — the per-clip inference driver covering all runtime
//!   modes, with exact per-component work counters.
//! * [`schedule`] — keyframe placement analysis and the runtime cost
//!   model relating sparse-keyframe inference to per-frame inference.
//! * [`verify`] — the self-check battery backing `impression verify`.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod fusion;
pub mod nets;
pub mod pipeline;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;
