//! Monte Carlo ELBO estimators.
//!
//! Every estimator reduces to a list of forward passes, each with a set of
//! masked positions and a weight applied to every masked token's
//! log-probability:
//!
//! | form    | draw                          | weight per masked token |
//! |---------|-------------------------------|-------------------------|
//! | t-form  | `t ~ U(0,1]`, Bernoulli(t)    | `1/t`                   |
//! | l-form  | `l ~ U{1..L}`, `l` of `L`     | `L/l`                   |
//! | coupled | `l ~ U{0..L}` plus complement | `(L+1)/(2l)` per side   |
//!
//! `L` counts eligible (non-pad) positions. The same builder produces both
//! the cached values stored at rollout time and the differentiable values in
//! the training loss, so identical parameters and draws give bit-identical
//! numbers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{draw_l, draw_t, MaskDraw, MaskLevel, TokenSequence};
use crate::error::{domain, Result};
use crate::nn::{Bound, Denoiser, Graph, ParameterSet, TokenBatch, Var};
use crate::variance::CoupledDraw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorForm {
    TForm,
    LForm,
    Coupled,
}

/// The random choices behind an estimate, kept so they can be replayed
/// under other parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DrawPlan {
    TForm(Vec<MaskDraw>),
    LForm(Vec<MaskDraw>),
    Coupled(Vec<CoupledDraw>),
}

/// One forward pass of an estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    /// Monte Carlo sample this pass belongs to.
    pub sample: usize,
    pub positions: Vec<usize>,
    /// Multiplies each masked token's log-probability.
    pub weight: f64,
}

impl DrawPlan {
    pub fn form(&self) -> EstimatorForm {
        match self {
            DrawPlan::TForm(_) => EstimatorForm::TForm,
            DrawPlan::LForm(_) => EstimatorForm::LForm,
            DrawPlan::Coupled(_) => EstimatorForm::Coupled,
        }
    }

    /// Number of Monte Carlo samples (coupled: pairs).
    pub fn samples(&self) -> usize {
        match self {
            DrawPlan::TForm(d) | DrawPlan::LForm(d) => d.len(),
            DrawPlan::Coupled(d) => d.len(),
        }
    }

    /// Forward passes with their weights; passes with no masked token are
    /// dropped since they contribute exactly zero.
    pub fn passes(&self, n_eligible: usize) -> Vec<Pass> {
        let n = n_eligible as f64;
        let mut out = Vec::new();
        match self {
            DrawPlan::TForm(draws) => {
                for (s, d) in draws.iter().enumerate() {
                    if let (MaskLevel::Rate(t), false) = (d.level, d.positions.is_empty()) {
                        out.push(Pass {
                            sample: s,
                            positions: d.positions.clone(),
                            weight: 1.0 / t,
                        });
                    }
                }
            }
            DrawPlan::LForm(draws) => {
                for (s, d) in draws.iter().enumerate() {
                    if !d.positions.is_empty() {
                        out.push(Pass {
                            sample: s,
                            positions: d.positions.clone(),
                            weight: n / d.positions.len() as f64,
                        });
                    }
                }
            }
            DrawPlan::Coupled(pairs) => {
                for (s, pair) in pairs.iter().enumerate() {
                    for side in [&pair.primary, &pair.complement] {
                        if !side.is_empty() {
                            out.push(Pass {
                                sample: s,
                                positions: side.clone(),
                                weight: (n + 1.0) / (2.0 * side.len() as f64),
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        match self {
            DrawPlan::TForm(d) => {
                for draw in d {
                    if !matches!(draw.level, MaskLevel::Rate(_)) {
                        return Err(domain("t-form plan holds a count-form draw"));
                    }
                    draw.validate(seq)?;
                }
            }
            DrawPlan::LForm(d) => {
                for draw in d {
                    if !matches!(draw.level, MaskLevel::Count(_)) {
                        return Err(domain("l-form plan holds a rate-form draw"));
                    }
                    draw.validate(seq)?;
                }
            }
            DrawPlan::Coupled(p) => {
                for pair in p {
                    pair.validate(seq)?;
                }
            }
        }
        Ok(())
    }
}

/// An ELBO estimate for one sequence, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    /// Contribution of each completion position; zero where never masked.
    pub per_token: Vec<f64>,
    /// Value of each individual Monte Carlo sample; `value` is their mean.
    pub sample_values: Vec<f64>,
    pub plan: DrawPlan,
    pub samples: usize,
    pub form: EstimatorForm,
}

impl ElboEstimate {
    /// Standard error of the mean from the per-sample spread.
    pub fn std_error(&self) -> f64 {
        let n = self.sample_values.len();
        if n < 2 {
            return f64::NAN;
        }
        let mean = self.sample_values.iter().sum::<f64>() / n as f64;
        let var = self.sample_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    }
}

/// The `k`-th (0-based) per-token contribution.
pub fn per_token_elbo(estimate: &ElboEstimate, k: usize) -> Result<f64> {
    estimate.per_token.get(k).copied().ok_or_else(|| {
        domain(format!(
            "position {k} outside completion of length {}",
            estimate.per_token.len()
        ))
    })
}

/// Graph outputs of [`build_elbo_graph`].
#[derive(Debug, Clone)]
pub struct ElboVars {
    /// `1 x items`: estimate per item.
    pub totals: Var,
    /// `1 x sum(L)`: per-token contributions, item after item.
    pub per_token: Var,
    /// `1 x sum(m)`: individual Monte Carlo sample values.
    pub per_sample: Var,
    pub token_offsets: Vec<usize>,
    pub sample_offsets: Vec<usize>,
}

/// Appends the estimators for every `(sequence, plan)` item to `g`.
pub fn build_elbo_graph(
    g: &mut Graph,
    bound: &Bound,
    model: &Denoiser,
    items: &[(&TokenSequence, &DrawPlan)],
) -> Result<ElboVars> {
    let v = model.vocab_size();
    let mut batch = TokenBatch::new();
    let mut gather = Vec::new();
    let (mut w_total, mut w_sample) = (Vec::new(), Vec::new());
    let (mut seg_item, mut seg_token, mut seg_sample) = (Vec::new(), Vec::new(), Vec::new());
    let mut token_offsets = Vec::with_capacity(items.len());
    let mut sample_offsets = Vec::with_capacity(items.len());
    let (mut tok_off, mut samp_off) = (0usize, 0usize);

    for (b, (seq, plan)) in items.iter().enumerate() {
        token_offsets.push(tok_off);
        sample_offsets.push(samp_off);
        let m = plan.samples().max(1) as f64;
        let prompt_len = seq.prompt().len();
        for pass in plan.passes(seq.num_eligible()) {
            let start = batch.push(&seq.tokens_with_masks(&pass.positions));
            for &p in &pass.positions {
                let row = start + prompt_len + p;
                gather.push(row * v + seq.completion()[p] as usize);
                w_total.push(pass.weight / m);
                w_sample.push(pass.weight);
                seg_item.push(b);
                seg_token.push(tok_off + p);
                seg_sample.push(samp_off + pass.sample);
            }
        }
        tok_off += seq.len();
        samp_off += plan.samples();
    }

    let picked = if batch.is_empty() {
        g.constant_row(Vec::new())
    } else {
        let logp = model.forward(g, bound, &batch)?;
        g.gather(logp, gather)
    };
    let per_token = g.segment_sum(picked, w_total.clone(), seg_token, tok_off);
    let totals = g.segment_sum(picked, w_total, seg_item, items.len());
    let per_sample = g.segment_sum(picked, w_sample, seg_sample, samp_off);
    Ok(ElboVars {
        totals: g.name(totals, "elbo"),
        per_token,
        per_sample,
        token_offsets,
        sample_offsets,
    })
}

/// Rows per evaluation chunk; bounds tape memory.
const CHUNK_ROWS: usize = 4096;

/// Evaluates many estimates without keeping gradients.
///
/// Items are never split across chunks, so results do not depend on chunking.
pub fn estimate_many(
    model: &Denoiser,
    params: &ParameterSet,
    items: &[(&TokenSequence, &DrawPlan)],
) -> Result<Vec<ElboEstimate>> {
    let mut out = Vec::with_capacity(items.len());
    let mut start = 0;
    while start < items.len() {
        let mut end = start;
        let mut rows = 0;
        while end < items.len() {
            let (seq, plan) = items[end];
            let r = plan.passes(seq.num_eligible()).len() * (seq.prompt().len() + seq.len());
            if end > start && rows + r > CHUNK_ROWS {
                break;
            }
            rows += r;
            end += 1;
        }
        let chunk = &items[start..end];
        let mut g = Graph::new();
        let bound = g.bind(params);
        let vars = build_elbo_graph(&mut g, &bound, model, chunk)?;
        let totals = g.value(vars.totals).to_vec();
        let per_token = g.value(vars.per_token).to_vec();
        let per_sample = g.value(vars.per_sample).to_vec();
        for (i, (seq, plan)) in chunk.iter().enumerate() {
            let t0 = vars.token_offsets[i];
            let s0 = vars.sample_offsets[i];
            out.push(ElboEstimate {
                value: totals[i],
                per_token: per_token[t0..t0 + seq.len()].to_vec(),
                sample_values: per_sample[s0..s0 + plan.samples()].to_vec(),
                plan: (*plan).clone(),
                samples: plan.samples(),
                form: plan.form(),
            });
        }
        start = end;
    }
    Ok(out)
}

pub fn estimate(model: &Denoiser, params: &ParameterSet, seq: &TokenSequence, plan: &DrawPlan) -> Result<ElboEstimate> {
    plan.validate(seq)?;
    Ok(estimate_many(model, params, &[(seq, plan)])?.remove(0))
}

/// `m` l-form draws with `l ~ U{1..L}`.
pub fn draw_plan_l<R: Rng + ?Sized>(seq: &TokenSequence, m: usize, rng: &mut R) -> Result<DrawPlan> {
    let n = seq.num_eligible();
    let mut draws = Vec::with_capacity(m);
    for _ in 0..m {
        if n == 0 {
            draws.push(MaskDraw {
                level: MaskLevel::Count(0),
                positions: Vec::new(),
            });
            continue;
        }
        let l = rng.random_range(1..=n);
        draws.push(draw_l(seq, l, rng)?);
    }
    Ok(DrawPlan::LForm(draws))
}

/// `m` t-form draws with `t ~ U(0,1]`.
pub fn draw_plan_t<R: Rng + ?Sized>(seq: &TokenSequence, m: usize, rng: &mut R) -> Result<DrawPlan> {
    let mut draws = Vec::with_capacity(m);
    for _ in 0..m {
        let t = 1.0 - rng.random::<f64>();
        draws.push(draw_t(seq, t, rng)?);
    }
    Ok(DrawPlan::TForm(draws))
}

/// Discrete-count ELBO estimate averaged over `m` draws.
///
/// When `draws` is given it must be an l-form plan for `seq`; it is reused
/// as-is and `rng` is untouched.
pub fn elbo_l<R: Rng + ?Sized>(
    model: &Denoiser,
    params: &ParameterSet,
    seq: &TokenSequence,
    m: usize,
    rng: &mut R,
    draws: Option<&DrawPlan>,
) -> Result<ElboEstimate> {
    let plan = match draws {
        Some(p @ DrawPlan::LForm(_)) => p.clone(),
        Some(_) => return Err(domain("elbo_l needs an l-form draw plan")),
        None => {
            if m == 0 {
                return Err(domain("need at least one Monte Carlo sample"));
            }
            draw_plan_l(seq, m, rng)?
        }
    };
    estimate(model, params, seq, &plan)
}

/// Continuous-time ELBO estimate averaged over `m` draws.
pub fn elbo_t<R: Rng + ?Sized>(
    model: &Denoiser,
    params: &ParameterSet,
    seq: &TokenSequence,
    m: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if m == 0 {
        return Err(domain("need at least one Monte Carlo sample"));
    }
    let plan = draw_plan_t(seq, m, rng)?;
    estimate(model, params, seq, &plan)
}

/// Appends mean-field log-probabilities `log p(y^k | x, fully masked
/// completion)` for each sequence; returns a `1 x sum(L)` vector with zeros
/// at pad positions, and each sequence's offset.
pub fn build_meanfield_graph(
    g: &mut Graph,
    bound: &Bound,
    model: &Denoiser,
    seqs: &[&TokenSequence],
) -> Result<(Var, Vec<usize>)> {
    let v = model.vocab_size();
    let mut batch = TokenBatch::new();
    let mut gather = Vec::new();
    let mut seg = Vec::new();
    let mut offsets = Vec::with_capacity(seqs.len());
    let mut off = 0;
    for seq in seqs {
        offsets.push(off);
        let eligible = seq.eligible();
        if !eligible.is_empty() {
            let start = batch.push(&seq.tokens_with_masks(&eligible));
            for &p in &eligible {
                gather.push((start + seq.prompt().len() + p) * v + seq.completion()[p] as usize);
                seg.push(off + p);
            }
        }
        off += seq.len();
    }
    let picked = if batch.is_empty() {
        g.constant_row(Vec::new())
    } else {
        let logp = model.forward(g, bound, &batch)?;
        g.gather(logp, gather)
    };
    let n = seg.len();
    let out = g.segment_sum(picked, vec![1.0; n], seg, off);
    Ok((g.name(out, "meanfield_logp"), offsets))
}

/// Mean-field per-token log-probabilities, one vector per sequence.
pub fn meanfield_logps(model: &Denoiser, params: &ParameterSet, seqs: &[&TokenSequence]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let mut g = Graph::new();
        let bound = g.bind(params);
        let (var, offsets) = build_meanfield_graph(&mut g, &bound, model, chunk)?;
        let vals = g.value(var);
        for (seq, off) in chunk.iter().zip(offsets) {
            out.push(vals[off..off + seq.len()].to_vec());
        }
    }
    Ok(out)
}
