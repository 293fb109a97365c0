//! Masked diffusion: corruption, ELBO estimation and decoding.

pub mod elbo;
pub mod sampler;
pub mod sequence;

pub use elbo::{
    build_elbo_graph, build_meanfield_graph, draw_plan_l, draw_plan_t, elbo_l, elbo_t, estimate, estimate_many,
    meanfield_logps, per_token_elbo, DrawPlan, ElboEstimate, ElboVars, EstimatorForm, Pass,
};
pub use sampler::{sample, sample_batch, SampleTrace, SamplerConfig, TieBreak};
pub use sequence::{corrupt_l, corrupt_t, MaskDraw, MaskLevel, MaskedSequence, TokenSequence};
