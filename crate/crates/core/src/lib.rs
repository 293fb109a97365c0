//! Sequence-level policy optimization for masked diffusion language models.
//!
//! The crate bundles a tiny trainable denoiser with its own reverse-mode
//! autodiff ([`nn`]), masked-diffusion likelihood bounds and a
//! low-confidence sampler ([`mdm`]), variance-reduced estimators
//! ([`variance`]), brute-force ground truth for tiny instances ([`oracle`]),
//! the policy-optimization surrogates and KL estimators ([`objective`]),
//! verifiable toy tasks ([`tasks`]) and the RL training loop ([`train`]).

pub mod error;
pub mod mdm;
pub mod nn;
pub mod objective;
pub mod oracle;
pub mod tasks;
pub mod train;
pub mod variance;
pub mod vocab;

pub use error::{Error, Result};
