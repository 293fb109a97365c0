//! The RL loop: rollouts under a frozen policy, cached likelihoods on shared
//! draws, several optimizer steps per batch, and metrics.

pub mod config;
pub mod flops;
pub mod optim;
pub mod rollout;
pub mod trainer;

pub use config::{ModelShape, TrainRunConfig, WarmStart};
pub use flops::{flops_multiplier, flops_per_sample};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use rollout::{replay_elbo, rollout, verify_replay, RngSnapshot, RolloutRecord, RolloutSpec};
pub use trainer::{
    answer_tokens, deterministic_from_env, evaluate, load_model_params, train_step, warm_start, EvalOutcome,
    EvalReport, StepMetrics, Trainer, UpdateStats, DETERMINISTIC_ENV,
};
