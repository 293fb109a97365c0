//! Group rollouts under the frozen rollout policy, with cached likelihoods.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdm::{estimate_many, meanfield_logps, sample_batch, DrawPlan, ElboEstimate, SamplerConfig, TokenSequence};
use crate::nn::{Denoiser, ParameterSet};
use crate::objective::{group_advantages, CompletionGroup};
use crate::tasks::{AnswerFormat, TaskInstance};
use crate::variance::draw_plan;
use crate::vocab::{Token, Vocab};

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One group's rollout, serialized for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub instance: TaskInstance,
    pub texts: Vec<String>,
    pub group: CompletionGroup,
    /// State of the group's generator before any completion was sampled.
    pub rng: RngSnapshot,
    pub timestamp_s: f64,
}

/// What a rollout needs besides parameters.
#[derive(Debug, Clone)]
pub struct RolloutSpec<'a> {
    pub vocab: &'a Vocab,
    pub format: AnswerFormat,
    pub group_size: usize,
    pub completion_len: usize,
    pub sampler: SamplerConfig,
    pub plan_form: crate::mdm::EstimatorForm,
    pub mc_samples: usize,
    /// Also cache fully-masked per-token log-probabilities.
    pub meanfield: bool,
}

/// Samples `G` completions per instance under `old`, scores them, and caches
/// `old` and `reference` ELBOs on one shared draw plan per completion.
///
/// Each instance gets its own generator split off `rng`; every completion
/// then gets its own stream, and the draw plans come last.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &Denoiser,
    old: &ParameterSet,
    reference: &ParameterSet,
    instances: &[TaskInstance],
    spec: &RolloutSpec<'_>,
    rng: &mut ChaCha8Rng,
    step: usize,
    timestamp_s: f64,
) -> Result<Vec<RolloutRecord>> {
    if instances.is_empty() {
        return Err(crate::error::domain("rollout needs at least one instance"));
    }
    let g = spec.group_size;
    let mut group_rngs = Vec::with_capacity(instances.len());
    let mut snapshots = Vec::with_capacity(instances.len());
    let mut prompts: Vec<Vec<Token>> = Vec::with_capacity(instances.len());
    for inst in instances {
        let grng = ChaCha8Rng::seed_from_u64(rng.random());
        snapshots.push(RngSnapshot::capture(&grng));
        group_rngs.push(grng);
        prompts.push(spec.vocab.encode(inst.prompt())?);
    }
    let traces = sample_groups(model, old, &prompts, spec, &mut group_rngs)?;

    let mut records = Vec::with_capacity(instances.len());
    let mut plans: Vec<DrawPlan> = Vec::with_capacity(instances.len() * g);
    let mut seqs: Vec<TokenSequence> = Vec::with_capacity(instances.len() * g);
    for (i, inst) in instances.iter().enumerate() {
        let completions: Vec<TokenSequence> = traces[i * g..(i + 1) * g].to_vec();
        let texts: Vec<String> = completions.iter().map(|s| spec.vocab.decode(s.completion())).collect();
        let rewards: Vec<f64> = texts.iter().map(|t| inst.reward(t, spec.format)).collect();
        let advantages = group_advantages(&rewards)?;
        for s in &completions {
            plans.push(draw_plan(spec.plan_form, s, spec.mc_samples, &mut group_rngs[i])?);
        }
        seqs.extend(completions.iter().cloned());
        records.push(RolloutRecord {
            step,
            instance: inst.clone(),
            texts,
            group: CompletionGroup {
                prompt: prompts[i].clone(),
                completions,
                rewards,
                advantages,
                old_elbo: Vec::new(),
                ref_elbo: Vec::new(),
                old_meanfield: Vec::new(),
            },
            rng: snapshots[i].clone(),
            timestamp_s,
        });
    }

    let items: Vec<(&TokenSequence, &DrawPlan)> = seqs.iter().zip(&plans).collect();
    let old_elbo = estimate_many(model, old, &items)?;
    let ref_elbo = estimate_many(model, reference, &items)?;
    let seq_refs: Vec<&TokenSequence> = seqs.iter().collect();
    let mf = if spec.meanfield {
        meanfield_logps(model, old, &seq_refs)?
    } else {
        Vec::new()
    };
    for (i, rec) in records.iter_mut().enumerate() {
        rec.group.old_elbo = old_elbo[i * g..(i + 1) * g].to_vec();
        rec.group.ref_elbo = ref_elbo[i * g..(i + 1) * g].to_vec();
        if spec.meanfield {
            rec.group.old_meanfield = mf[i * g..(i + 1) * g].to_vec();
        }
    }
    Ok(records)
}

fn sample_groups(
    model: &Denoiser,
    params: &ParameterSet,
    prompts: &[Vec<Token>],
    spec: &RolloutSpec<'_>,
    group_rngs: &mut [ChaCha8Rng],
) -> Result<Vec<TokenSequence>> {
    let mut rngs: Vec<ChaCha8Rng> = Vec::with_capacity(prompts.len() * spec.group_size);
    let mut flat: Vec<&[Token]> = Vec::with_capacity(prompts.len() * spec.group_size);
    for (p, grng) in prompts.iter().zip(group_rngs.iter_mut()) {
        for _ in 0..spec.group_size {
            rngs.push(ChaCha8Rng::seed_from_u64(grng.random()));
            flat.push(p);
        }
    }
    let mut handles: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
    let traces = sample_batch(model, params, &flat, spec.completion_len, &spec.sampler, &mut handles)?;
    Ok(traces.into_iter().map(|t| t.sequence).collect())
}

/// Re-samples a record's completions from its rng snapshot and re-evaluates
/// its ELBOs under `old` on the stored draws; fails unless both reproduce
/// exactly.
pub fn verify_replay(
    model: &Denoiser,
    old: &ParameterSet,
    record: &RolloutRecord,
    spec: &RolloutSpec<'_>,
) -> Result<()> {
    let mut grng = record.rng.restore();
    let seqs = sample_groups(
        model,
        old,
        std::slice::from_ref(&record.group.prompt),
        spec,
        std::slice::from_mut(&mut grng),
    )?;
    if seqs != record.group.completions {
        return Err(Error::Consistency("replayed completions differ from the record".into()));
    }
    let fresh = replay_elbo(model, old, &record.group)?;
    if fresh != record.group.old_elbo {
        return Err(Error::Consistency(
            "replayed ELBOs differ from the cached values".into(),
        ));
    }
    Ok(())
}

/// ELBOs of a group's completions under `params` on the recorded draws.
pub fn replay_elbo(model: &Denoiser, params: &ParameterSet, group: &CompletionGroup) -> Result<Vec<ElboEstimate>> {
    let items: Vec<(&TokenSequence, &DrawPlan)> = group
        .completions
        .iter()
        .zip(&group.old_elbo)
        .map(|(s, e)| (s, &e.plan))
        .collect();
    estimate_many(model, params, &items)
}
