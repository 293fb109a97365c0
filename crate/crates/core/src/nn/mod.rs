//! Differentiable substrate: parameters, the autodiff tape, the denoiser,
//! gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Bound, Graph, Segment, Shape, Var};
pub use model::{eval_batch, forward_logits, Denoiser, DenoiserConfig, LogProbTable, TokenBatch};
pub use params::{ParamArray, ParameterSet};
