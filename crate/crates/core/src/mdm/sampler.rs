//! Iterative low-confidence unmasking with semi-autoregressive blocks.
//!
//! Decoding starts from an all-mask completion. At each step the denoiser is
//! run once; inside the current block every masked position proposes a token
//! and a confidence, and the most confident proposals are committed. A block
//! must be filled before the next one opens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::TokenSequence;
use crate::error::{domain, Result};
use crate::nn::{eval_batch, Denoiser, ParameterSet, TokenBatch};
use crate::vocab::{Token, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Equal confidences commit the lowest position first.
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub tokens_per_step: usize,
    /// Semi-autoregressive block length; 0 means one block spanning the completion.
    #[serde(default)]
    pub block_len: usize,
    /// 0 decodes greedily.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tokens_per_step: 2,
            block_len: 0,
            temperature: 0.0,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_step == 0 {
            return Err(domain("tokens_per_step must be at least 1"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(domain(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Block length after capping at `len`.
    pub fn effective_block(&self, len: usize) -> usize {
        if self.block_len == 0 || self.block_len >= len {
            len
        } else {
            self.block_len
        }
    }

    /// Total denoising steps `K` for a completion of `len` tokens.
    pub fn steps(&self, len: usize) -> usize {
        let b = self.effective_block(len).max(1);
        let mut k = 0;
        let mut start = 0;
        while start < len {
            let size = b.min(len - start);
            k += size.div_ceil(self.tokens_per_step);
            start += size;
        }
        k
    }
}

/// A decoded completion and the positions committed at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sequence: TokenSequence,
    pub steps: Vec<Vec<usize>>,
}

/// Decodes one completion of length `len`.
pub fn sample<R: Rng + ?Sized>(
    model: &Denoiser,
    params: &ParameterSet,
    prompt: &[Token],
    len: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleTrace> {
    let mut rngs = [rng];
    Ok(sample_batch(model, params, &[prompt], len, cfg, &mut rngs)?.remove(0))
}

struct Decoding {
    tokens: Vec<Token>,
    prompt_len: usize,
    block: usize,
    steps: Vec<Vec<usize>>,
}

/// Decodes one completion per prompt, batching the forward passes.
///
/// Each completion draws only from its own rng, so results do not depend on
/// how prompts are grouped.
pub fn sample_batch<R: Rng + ?Sized, Q: std::ops::DerefMut<Target = R>>(
    model: &Denoiser,
    params: &ParameterSet,
    prompts: &[&[Token]],
    len: usize,
    cfg: &SamplerConfig,
    rngs: &mut [Q],
) -> Result<Vec<SampleTrace>> {
    cfg.validate()?;
    if len == 0 {
        return Err(domain("completion length must be at least 1"));
    }
    if rngs.len() != prompts.len() {
        return Err(domain("need one rng per prompt"));
    }
    if let Some(&t) = prompts.iter().flat_map(|p| p.iter()).find(|&&t| t == MASK) {
        return Err(domain(format!("prompt contains the mask symbol {t}")));
    }
    let block = cfg.effective_block(len);
    let v = model.vocab_size();
    let mut states: Vec<Decoding> = prompts
        .iter()
        .map(|p| {
            let mut tokens = p.to_vec();
            tokens.extend(std::iter::repeat_n(MASK, len));
            Decoding {
                tokens,
                prompt_len: p.len(),
                block: 0,
                steps: Vec::new(),
            }
        })
        .collect();

    for _ in 0..cfg.steps(len) {
        let mut batch = TokenBatch::new();
        for s in &states {
            batch.push(&s.tokens);
        }
        let logp = eval_batch(model, params, &batch)?;
        let mut row0 = 0;
        for (s, rng) in states.iter_mut().zip(rngs.iter_mut()) {
            let rng: &mut R = rng;
            let lo = s.block * block;
            let hi = (lo + block).min(len);
            let mut proposals = Vec::new();
            for p in lo..hi {
                if s.tokens[s.prompt_len + p] != MASK {
                    continue;
                }
                let r = row0 + s.prompt_len + p;
                let row = &logp[r * v..(r + 1) * v];
                let (tok, conf) = propose(row, cfg.temperature, rng);
                proposals.push((p, tok, conf));
            }
            // stable sort keeps ascending position among equal confidences
            proposals.sort_by(|a, b| b.2.total_cmp(&a.2));
            let mut committed: Vec<usize> = proposals
                .iter()
                .take(cfg.tokens_per_step)
                .map(|&(p, tok, _)| {
                    s.tokens[s.prompt_len + p] = tok;
                    p
                })
                .collect();
            committed.sort_unstable();
            s.steps.push(committed);
            if (lo..hi).all(|p| s.tokens[s.prompt_len + p] != MASK) {
                s.block += 1;
            }
            row0 += s.tokens.len();
        }
    }

    states
        .into_iter()
        .map(|s| {
            debug_assert!(!s.tokens.contains(&MASK));
            let completion = s.tokens[s.prompt_len..].to_vec();
            let prompt = s.tokens[..s.prompt_len].to_vec();
            Ok(SampleTrace {
                sequence: TokenSequence::new(prompt, completion)?,
                steps: s.steps,
            })
        })
        .collect()
}

/// Proposes a token for one masked position from its log-probability row,
/// never the mask symbol. Returns the token and its confidence.
fn propose<R: Rng + ?Sized>(row: &[f64], temperature: f64, rng: &mut R) -> (Token, f64) {
    let emittable = |t: usize| t as Token != MASK;
    if temperature == 0.0 {
        let mut best = None;
        for (t, &lp) in row.iter().enumerate() {
            if emittable(t) && best.is_none_or(|(_, b)| lp > b) {
                best = Some((t, lp));
            }
        }
        let (t, lp) = best.expect("vocabulary has an emittable token");
        let norm = lse_where(row, 1.0, emittable);
        return (t as Token, (lp - norm).exp());
    }
    let norm = lse_where(row, temperature, emittable);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (t, &lp) in row.iter().enumerate() {
        if !emittable(t) {
            continue;
        }
        let p = (lp / temperature - norm).exp();
        acc += p;
        last = Some((t, p));
        if u < acc {
            return (t as Token, p);
        }
    }
    // rounding left the cumulative sum just below u
    let (t, p) = last.expect("vocabulary has an emittable token");
    (t as Token, p)
}

fn lse_where(row: &[f64], temperature: f64, keep: impl Fn(usize) -> bool) -> f64 {
    let scaled: Vec<f64> = row
        .iter()
        .enumerate()
        .filter(|&(t, _)| keep(t))
        .map(|(_, &lp)| lp / temperature)
        .collect();
    crate::nn::kernels::log_sum_exp(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenoiserConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(max_len: usize) -> (Denoiser, ParameterSet) {
        let mut cfg = DenoiserConfig::new(6, 8, 1, 2, max_len);
        cfg.init_std = 0.5;
        let m = Denoiser::new(cfg).unwrap();
        let p = m.init(&mut ChaCha8Rng::seed_from_u64(3));
        (m, p)
    }

    #[test]
    fn step_counts() {
        let cfg = SamplerConfig {
            tokens_per_step: 2,
            ..Default::default()
        };
        assert_eq!(cfg.steps(256), 128);
        assert_eq!(cfg.steps(7), 4);
        let blocks = SamplerConfig {
            tokens_per_step: 3,
            block_len: 4,
            ..Default::default()
        };
        assert_eq!(blocks.steps(8), 4);
        assert_eq!(blocks.steps(10), 5);
    }

    #[test]
    fn greedy_ignores_seed_and_leaves_no_masks() {
        let (m, p) = tiny(12);
        let cfg = SamplerConfig::default();
        let a = sample(&m, &p, &[2, 3], 8, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample(&m, &p, &[2, 3], 8, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(!a.sequence.completion().contains(&MASK));
        assert_eq!(a.steps.len(), 4);
        let mut all: Vec<usize> = a.steps.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn blocks_fill_in_order() {
        let (m, p) = tiny(12);
        let cfg = SamplerConfig {
            tokens_per_step: 1,
            block_len: 4,
            temperature: 1.0,
            ..Default::default()
        };
        for seed in 0..5 {
            let tr = sample(&m, &p, &[2], 8, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let order = tr.steps.concat();
            assert!(order[..4].iter().all(|&q| q < 4), "{order:?}");
            assert!(order[4..].iter().all(|&q| q >= 4), "{order:?}");
        }
    }

    #[test]
    fn batching_matches_single_decoding() {
        let (m, p) = tiny(12);
        let cfg = SamplerConfig {
            tokens_per_step: 2,
            temperature: 0.9,
            ..Default::default()
        };
        let prompts: Vec<Vec<Token>> = vec![vec![2, 3], vec![4], vec![5, 5, 2]];
        let refs: Vec<&[Token]> = prompts.iter().map(|p| p.as_slice()).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
        let mut handles: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
        let batched = sample_batch(&m, &p, &refs, 6, &cfg, &mut handles).unwrap();
        for (i, pr) in refs.iter().enumerate() {
            let single = sample(&m, &p, pr, 6, &cfg, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
            assert_eq!(single, batched[i]);
        }
    }

    #[test]
    fn greedy_confidence_is_max_probability() {
        let row = [-0.1f64.exp().ln(), -3.0, -1.0, -2.0];
        let (t, c) = propose(&row, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        // token 1 is the mask symbol and excluded
        assert_eq!(t, 0);
        let z = [row[0], row[2], row[3]].iter().map(|x| x.exp()).sum::<f64>();
        assert!((c - row[0].exp() / z).abs() < 1e-12);
    }
}
