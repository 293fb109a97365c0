use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainRunConfig;
use super::flops::flops_per_sample;
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use super::rollout::{rollout, RolloutRecord, RolloutSpec};
use crate::error::{Error, Result};
use crate::mdm::{build_elbo_graph, sample_batch, DrawPlan, EstimatorForm, SamplerConfig, TokenSequence};
use crate::nn::{checkpoint, Denoiser, Graph, ParameterSet};
use crate::objective::{policy_loss, CompletionGroup, ObjectiveConfig};
use crate::tasks::{AnswerFormat, TaskInstance};
use crate::variance::draw_plan;
use crate::vocab::{Token, Vocab, PAD};

/// Environment variable that, when set to `1`, selects single-worker
/// deterministic mode: wall-clock fields are written as 0 so that metrics
/// streams are byte-identical across runs.
pub const DETERMINISTIC_ENV: &str = "ESPO_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub grad_norm: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub mean_ratio: f64,
    pub loss: f64,
    pub elapsed_s: f64,
    pub flops_cum: f64,
}

/// Averages over the inner optimizer steps of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub mean_ratio: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// Mean ratio at the first inner step; exactly 1 after a refresh.
    pub first_mean_ratio: f64,
    pub skipped: usize,
    pub applied: usize,
}

/// `mu` optimizer steps on one batch of groups.
///
/// Steps whose gradient is not finite are skipped and counted.
pub fn train_step(
    model: &Denoiser,
    params: &mut ParameterSet,
    opt: &mut AdamW,
    groups: &[CompletionGroup],
    objective: &ObjectiveConfig,
    inner_steps: usize,
    grad_clip: f64,
) -> Result<UpdateStats> {
    let mut s = UpdateStats::default();
    for k in 0..inner_steps {
        let mut g = Graph::new();
        let bound = g.bind(params);
        let out = policy_loss(&mut g, &bound, model, groups, objective)?;
        let d = out.diagnostics;
        if k == 0 {
            s.first_mean_ratio = d.mean_ratio;
        }
        let grad = g.backward(out.loss).and_then(|mut grad| {
            grad.check_finite()?;
            let norm = clip_grad_norm(&mut grad, grad_clip);
            Ok((grad, norm))
        });
        match grad {
            Ok((grad, norm)) => {
                opt.step(params, &grad)?;
                s.applied += 1;
                s.grad_norm += norm;
                s.loss += d.loss;
                s.kl += d.kl;
                s.clip_frac += d.clip_frac;
                s.mean_ratio += d.mean_ratio;
            }
            Err(Error::Numeric { node, detail }) => {
                eprintln!("skipping inner step {k}: non-finite gradient at `{node}`: {detail}");
                s.skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if s.applied > 0 {
        let n = s.applied as f64;
        s.loss /= n;
        s.kl /= n;
        s.clip_frac /= n;
        s.mean_ratio /= n;
        s.grad_norm /= n;
    }
    Ok(s)
}

/// A completion of exactly `len` tokens holding the rendered answer,
/// right-padded.
pub fn answer_tokens(vocab: &Vocab, format: AnswerFormat, answer: &str, len: usize) -> Result<Vec<Token>> {
    let mut t = vocab.encode(&format.render(answer))?;
    if t.len() > len {
        return Err(Error::Config(format!(
            "reference answer needs {} tokens but completions hold {len}",
            t.len()
        )));
    }
    t.resize(len, PAD);
    Ok(t)
}

/// Supervised masked-diffusion training on reference answers: minimizes the
/// negative per-token ELBO with one coupled pair per example. Returns the
/// final batch loss.
#[allow(clippy::too_many_arguments)]
pub fn warm_start(
    model: &Denoiser,
    params: &mut ParameterSet,
    vocab: &Vocab,
    format: AnswerFormat,
    instances: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<TaskInstance>,
    len: usize,
    steps: usize,
    batch: usize,
    opt_cfg: AdamWConfig,
    grad_clip: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut opt = AdamW::new(opt_cfg, params);
    let mut last = f64::NAN;
    for _ in 0..steps {
        let mut seqs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let inst = instances(rng)?;
            let prompt = vocab.encode(inst.prompt())?;
            let completion = answer_tokens(vocab, format, inst.solution(), len)?;
            seqs.push(TokenSequence::new(prompt, completion)?);
        }
        let mut plans = Vec::with_capacity(batch);
        for s in &seqs {
            plans.push(draw_plan(EstimatorForm::Coupled, s, 1, rng)?);
        }
        let items: Vec<(&TokenSequence, &DrawPlan)> = seqs.iter().zip(&plans).collect();
        let mut g = Graph::new();
        let bound = g.bind(params);
        let vars = build_elbo_graph(&mut g, &bound, model, &items)?;
        let scale = -1.0 / (batch * len) as f64;
        let loss = g.segment_sum(vars.totals, vec![scale; batch], vec![0; batch], 1);
        last = g.scalar(loss);
        let mut grad = g.backward(loss)?;
        clip_grad_norm(&mut grad, grad_clip);
        opt.step(params, &grad)?;
    }
    Ok(last)
}

/// Per-instance outcome of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub prompt: String,
    pub completion: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean reward; absent when there were no instances.
    pub accuracy: Option<f64>,
    pub outcomes: Vec<EvalOutcome>,
}

/// Decodes one completion per instance and scores it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Denoiser,
    params: &ParameterSet,
    vocab: &Vocab,
    format: AnswerFormat,
    instances: &[TaskInstance],
    len: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut outcomes = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(64) {
        let prompts: Vec<Vec<Token>> = chunk.iter().map(|i| vocab.encode(i.prompt())).collect::<Result<_>>()?;
        let refs: Vec<&[Token]> = prompts.iter().map(|p| p.as_slice()).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
            .map(|i| ChaCha8Rng::seed_from_u64(seed.wrapping_add((outcomes.len() + i) as u64)))
            .collect();
        let mut handles: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
        let traces = sample_batch(model, params, &refs, len, sampler, &mut handles)?;
        for (inst, tr) in chunk.iter().zip(traces) {
            let completion = vocab.decode(tr.sequence.completion());
            outcomes.push(EvalOutcome {
                prompt: inst.prompt().to_string(),
                reward: inst.reward(&completion, format),
                completion,
            });
        }
    }
    let accuracy = if outcomes.is_empty() {
        None
    } else {
        Some(outcomes.iter().map(|o| o.reward).sum::<f64>() / outcomes.len() as f64)
    };
    Ok(EvalReport { accuracy, outcomes })
}

/// The full RL loop state.
pub struct Trainer {
    pub cfg: TrainRunConfig,
    pub model: Denoiser,
    pub vocab: Vocab,
    pub params: ParameterSet,
    /// Frozen policy for the KL penalty, taken when RL starts.
    pub reference: ParameterSet,
    pub opt: AdamW,
    pub step: usize,
    pub flops_cum: f64,
    pub deterministic: bool,
    pub warm_start_loss: Option<f64>,
    rng: ChaCha8Rng,
    pool: Vec<TaskInstance>,
    started: Instant,
}

impl Trainer {
    /// Initializes parameters from the seed and runs the warm start, if any.
    pub fn new(cfg: TrainRunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Denoiser::new(cfg.denoiser())?;
        let vocab = cfg.task.vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = model.init(&mut rng);
        let pool = cfg.task.generate_many(&mut rng, cfg.train_pool)?;
        let mut wrng = ChaCha8Rng::seed_from_u64(rng.random());
        if let Some(s) = cfg.warm_start.seed {
            wrng = ChaCha8Rng::seed_from_u64(s);
            params = model.init(&mut wrng);
        }
        let mut warm_start_loss = None;
        if cfg.warm_start.steps > 0 {
            let w = &cfg.warm_start;
            let opt_cfg = AdamWConfig {
                lr: w.lr,
                ..cfg.adamw()
            };
            let task = w.task.clone().unwrap_or_else(|| cfg.task.clone());
            let mut source = |r: &mut ChaCha8Rng| task.generate(r);
            warm_start_loss = Some(warm_start(
                &model,
                &mut params,
                &vocab,
                cfg.task.answer_format,
                &mut source,
                cfg.completion_len,
                w.steps,
                w.batch_size,
                opt_cfg,
                cfg.grad_clip.max(1.0),
                &mut wrng,
            )?);
        }
        let reference = params.clone();
        let opt = AdamW::new(cfg.adamw(), &params);
        Ok(Self {
            model,
            vocab,
            reference,
            opt,
            step: 0,
            flops_cum: 0.0,
            deterministic: deterministic_from_env(),
            warm_start_loss,
            rng,
            pool,
            started: Instant::now(),
            params,
            cfg,
        })
    }

    fn elapsed(&self) -> f64 {
        if self.deterministic {
            0.0
        } else {
            self.started.elapsed().as_secs_f64()
        }
    }

    pub fn rollout_spec(&self) -> RolloutSpec<'_> {
        RolloutSpec {
            vocab: &self.vocab,
            format: self.cfg.task.answer_format,
            group_size: self.cfg.group_size,
            completion_len: self.cfg.completion_len,
            sampler: self.cfg.sampler(false),
            plan_form: self.cfg.estimator,
            mc_samples: self.cfg.mc_samples,
            meanfield: self.cfg.objective.variant.uses_meanfield(),
        }
    }

    fn next_instances(&mut self) -> Result<Vec<TaskInstance>> {
        let n = self.cfg.groups_per_batch();
        if self.pool.is_empty() {
            self.cfg.task.generate_many(&mut self.rng, n)
        } else {
            Ok((0..n)
                .map(|_| self.pool[self.rng.random_range(0..self.pool.len())].clone())
                .collect())
        }
    }

    /// FLOPs charged per sampled completion.
    pub fn flops_per_completion(&self, prompt_len: usize) -> Result<f64> {
        let k = self.cfg.sampler(false).steps(self.cfg.completion_len) as u64;
        let f = flops_per_sample(
            self.params.num_scalars() as u64,
            (prompt_len + self.cfg.completion_len) as u64,
            k,
            self.cfg.inner_steps as u64,
            self.cfg.mc_samples as u64,
            self.cfg.estimator == EstimatorForm::Coupled,
        )?;
        Ok(f as f64)
    }

    /// Rollout with `theta_old = theta`, then `mu` updates.
    pub fn step(&mut self) -> Result<(StepMetrics, UpdateStats, Vec<RolloutRecord>)> {
        let instances = self.next_instances()?;
        let old = self.params.clone();
        let ts = self.elapsed();
        let spec = self.rollout_spec();
        let mut rng = self.rng.clone();
        let records = rollout(
            &self.model,
            &old,
            &self.reference,
            &instances,
            &spec,
            &mut rng,
            self.step,
            ts,
        )?;
        self.rng = rng;
        let groups: Vec<CompletionGroup> = records.iter().map(|r| r.group.clone()).collect();
        let stats = train_step(
            &self.model,
            &mut self.params,
            &mut self.opt,
            &groups,
            &self.cfg.objective,
            self.cfg.inner_steps,
            self.cfg.grad_clip,
        )?;
        for r in &records {
            self.flops_cum += self.flops_per_completion(r.group.prompt.len())? * r.group.len() as f64;
        }
        let rewards: Vec<f64> = records.iter().flat_map(|r| r.group.rewards.iter().copied()).collect();
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rewards.len() as f64;
        let metrics = StepMetrics {
            step: self.step,
            mean_reward: mean,
            reward_std: var.sqrt(),
            grad_norm: stats.grad_norm,
            kl: stats.kl,
            clip_frac: stats.clip_frac,
            mean_ratio: stats.mean_ratio,
            loss: stats.loss,
            elapsed_s: self.elapsed(),
            flops_cum: self.flops_cum,
        };
        self.step += 1;
        Ok((metrics, stats, records))
    }

    /// Runs the configured number of steps, writing one JSON line per step
    /// to `metrics` and, if given, every rollout record to `rollouts`.
    pub fn run(&mut self, metrics: &mut dyn Write, mut rollouts: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let mut all = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let (m, _, records) = self.step()?;
            serde_json::to_writer(&mut *metrics, &m)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
            if let Some(w) = rollouts.as_deref_mut() {
                for r in &records {
                    serde_json::to_writer(&mut *w, r)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            all.push(m);
        }
        Ok(all)
    }

    /// Parameters followed by optimizer state, in the checkpoint format.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut all = self.params.clone();
        for a in self.opt.state_arrays().arrays() {
            all.insert(&a.name, &a.shape, a.data.clone())?;
        }
        checkpoint::save(path, &all)
    }

    pub fn evaluate(&self, instances: &[TaskInstance]) -> Result<EvalReport> {
        evaluate(
            &self.model,
            &self.params,
            &self.vocab,
            self.cfg.task.answer_format,
            instances,
            self.cfg.completion_len,
            &self.cfg.sampler(true),
            self.cfg.seed,
        )
    }
}

/// Model parameters from a checkpoint, dropping optimizer state.
pub fn load_model_params(path: &Path) -> Result<ParameterSet> {
    let all = checkpoint::load(path)?;
    let mut out = ParameterSet::new();
    for a in all.arrays().iter().filter(|a| !a.name.starts_with("opt.")) {
        out.insert(&a.name, &a.shape, a.data.clone())?;
    }
    Ok(out)
}
