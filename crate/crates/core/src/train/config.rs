use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::mdm::{EstimatorForm, SamplerConfig, TieBreak};
use crate::nn::DenoiserConfig;
use crate::objective::ObjectiveConfig;
use crate::tasks::{PromptStyle, TaskConfig, TaskKind};

/// Denoiser shape; vocabulary size follows from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// 0 means twice the width.
    #[serde(default)]
    pub mlp_hidden: usize,
    #[serde(default = "yes")]
    pub positional: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Longest prompt plus completion; 0 derives it from the task.
    #[serde(default)]
    pub max_len: usize,
}

fn yes() -> bool {
    true
}
fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 2,
            mlp_hidden: 0,
            positional: true,
            init_std: default_init_std(),
            max_len: 0,
        }
    }
}

/// Supervised masked-diffusion training on reference answers before RL, so
/// that rollouts start with a non-zero success rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStart {
    #[serde(default)]
    pub steps: usize,
    #[serde(default = "default_warm_batch")]
    pub batch_size: usize,
    #[serde(default = "default_warm_lr")]
    pub lr: f64,
    /// Task for warm-start data; defaults to the RL task.
    #[serde(default)]
    pub task: Option<TaskConfig>,
    /// When set, initialization and warm start use this seed instead of the
    /// run seed, so runs with different seeds share one base model.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_warm_batch() -> usize {
    32
}
fn default_warm_lr() -> f64 {
    3e-3
}

impl Default for WarmStart {
    fn default() -> Self {
        Self {
            steps: 0,
            batch_size: default_warm_batch(),
            lr: default_warm_lr(),
            task: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    pub group_size: usize,
    pub batch_size: usize,
    /// Optimizer steps per rollout batch (`mu`).
    pub inner_steps: usize,
    /// Monte Carlo samples per ELBO; pairs for the coupled estimator.
    pub mc_samples: usize,
    #[serde(default = "default_form")]
    pub estimator: EstimatorForm,
    pub completion_len: usize,
    #[serde(default = "one")]
    pub tokens_per_step: usize,
    #[serde(default)]
    pub block_len: usize,
    /// When given, must equal the step count implied by the schedule.
    #[serde(default)]
    pub denoising_steps: Option<usize>,
    pub temperature: f64,
    #[serde(default)]
    pub eval_temperature: f64,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub warm_start: WarmStart,
    /// Size of a fixed training pool; 0 draws fresh instances every step.
    #[serde(default)]
    pub train_pool: usize,
    #[serde(default)]
    pub eval_instances: usize,
}

fn default_form() -> EstimatorForm {
    EstimatorForm::Coupled
}
fn one() -> usize {
    1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}

impl TrainRunConfig {
    /// Desk-scale Sudoku defaults: G = 6, batch 24, mu = 8, m = 2, one
    /// token per step.
    pub fn toy_sudoku() -> Self {
        Self {
            task: TaskConfig::sudoku(),
            model: ModelShape::default(),
            objective: ObjectiveConfig::default(),
            group_size: 6,
            batch_size: 24,
            inner_steps: 8,
            mc_samples: 2,
            estimator: EstimatorForm::Coupled,
            completion_len: 16,
            tokens_per_step: 1,
            block_len: 0,
            denoising_steps: None,
            temperature: 0.9,
            eval_temperature: 0.0,
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: 0.0,
            grad_clip: 0.2,
            seed: 0,
            steps: 100,
            warm_start: WarmStart::default(),
            train_pool: 0,
            eval_instances: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.group_size) {
            return bad(format!(
                "batch_size {} must be a positive multiple of group_size {}",
                self.batch_size, self.group_size
            ));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if self.completion_len == 0 {
            return bad("completion_len must be at least 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.model.width == 0 || self.model.heads == 0 || !self.model.width.is_multiple_of(self.model.heads) {
            return bad("model width must be a positive multiple of heads".into());
        }
        self.sampler(false)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(k) = self.denoising_steps {
            let derived = self.sampler(false).steps(self.completion_len);
            if k != derived {
                return bad(format!(
                    "denoising_steps {k} disagrees with the schedule, which takes {derived} steps"
                ));
            }
        }
        self.objective.validate()?;
        self.adamw().validate()?;
        Ok(())
    }

    /// Sampler for rollouts (`eval = false`) or evaluation.
    pub fn sampler(&self, eval: bool) -> SamplerConfig {
        SamplerConfig {
            tokens_per_step: self.tokens_per_step,
            block_len: self.block_len,
            temperature: if eval { self.eval_temperature } else { self.temperature },
            tie_break: TieBreak::LowestIndex,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn groups_per_batch(&self) -> usize {
        self.batch_size / self.group_size
    }

    /// Upper bound on prompt length for the configured task.
    pub fn max_prompt_len(&self) -> usize {
        match (self.task.prompt_style, self.task.kind) {
            (PromptStyle::Full, _) => 1024,
            (PromptStyle::Compact, TaskKind::Sudoku) => 16,
            (PromptStyle::Compact, TaskKind::Countdown) => 40,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let s = &self.model;
        let max_len = if s.max_len == 0 {
            self.max_prompt_len() + self.completion_len
        } else {
            s.max_len
        };
        let mut cfg = DenoiserConfig::new(self.task.vocab().size(), s.width, s.layers, s.heads, max_len);
        cfg.mlp_hidden = s.mlp_hidden;
        cfg.positional = s.positional;
        cfg.init_std = s.init_std;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_derive_steps() {
        let mut c = TrainRunConfig::toy_sudoku();
        c.validate().unwrap();
        assert_eq!(c.sampler(false).steps(c.completion_len), 16);
        c.denoising_steps = Some(8);
        assert!(c.validate().is_err());
        c.denoising_steps = Some(16);
        c.batch_size = 25;
        assert!(c.validate().is_err());
    }
}
