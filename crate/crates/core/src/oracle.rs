//! Brute-force ground truth for tiny instances.
//!
//! * [`exact_elbo`] enumerates every non-empty mask of the completion.
//! * [`exact_loglik`] averages the likelihood over all unmasking orders with
//!   a subset recursion, which visits each unmasked set once instead of each
//!   order once.
//! * [`tabular_kl_grad_expectation`] gives the exact expected per-sample
//!   gradient of a KL estimator for a softmax policy over a finite set.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::mdm::TokenSequence;
use crate::nn::kernels::log_sum_exp;
use crate::nn::{eval_batch, Denoiser, Graph, ParameterSet, Shape, TokenBatch};
use crate::objective::KlEstimator;

pub const MAX_ELBO_LEN: usize = 8;
pub const MAX_LOGLIK_LEN: usize = 5;

/// Log-probabilities of the clean token at every eligible position, for
/// each mask in `masks` (bitmasks over the eligible positions).
///
/// Returns one row per mask, indexed by eligible slot; unmasked slots hold
/// the value the model assigns anyway, so callers must select.
fn clean_logps(model: &Denoiser, params: &ParameterSet, seq: &TokenSequence, masks: &[u32]) -> Result<Vec<Vec<f64>>> {
    let eligible = seq.eligible();
    let v = model.vocab_size();
    let off = seq.prompt().len();
    let mut out = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(256) {
        let mut batch = TokenBatch::new();
        let mut starts = Vec::with_capacity(chunk.len());
        for &mask in chunk {
            let positions: Vec<usize> = slots(mask).map(|j| eligible[j]).collect();
            starts.push(batch.push(&seq.tokens_with_masks(&positions)));
        }
        let logp = eval_batch(model, params, &batch)?;
        for start in starts {
            out.push(
                eligible
                    .iter()
                    .map(|&p| logp[(start + off + p) * v + seq.completion()[p] as usize])
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn slots(mask: u32) -> impl Iterator<Item = usize> {
    (0..32).filter(move |j| mask & (1 << j) != 0)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Average over all `l`-subsets of the summed masked log-probabilities,
/// for `l = 0..=n`.
pub fn subset_means(model: &Denoiser, params: &ParameterSet, seq: &TokenSequence) -> Result<Vec<f64>> {
    let n = seq.num_eligible();
    if seq.len() > MAX_ELBO_LEN {
        return Err(Error::Capacity(format!(
            "mask enumeration supports L <= {MAX_ELBO_LEN}, got {}",
            seq.len()
        )));
    }
    let masks: Vec<u32> = (1..(1u32 << n)).collect();
    let rows = clean_logps(model, params, seq, &masks)?;
    let mut sums = vec![0.0; n + 1];
    for (mask, row) in masks.iter().zip(&rows) {
        let l = mask.count_ones() as usize;
        sums[l] += slots(*mask).map(|j| row[j]).sum::<f64>();
    }
    Ok(sums
        .iter()
        .enumerate()
        .map(|(l, s)| if l == 0 { 0.0 } else { s / binomial(n, l) })
        .collect())
}

/// The ELBO computed exactly: `sum_l S_l / l`, where `S_l` averages the
/// masked log-probability sum over all `l`-subsets.
pub fn exact_elbo(model: &Denoiser, params: &ParameterSet, seq: &TokenSequence) -> Result<f64> {
    let s = subset_means(model, params, seq)?;
    Ok(s.iter().enumerate().skip(1).map(|(l, v)| v / l as f64).sum())
}

/// The same ELBO as the time integral of the rate-form integrand, by the
/// midpoint rule with `nodes` points.
///
/// Conditioning on the number of masked tokens leaves
/// `g(t) = (1/t) sum_l C(L,l) t^l (1-t)^(L-l) S_l`.
pub fn elbo_by_quadrature(model: &Denoiser, params: &ParameterSet, seq: &TokenSequence, nodes: usize) -> Result<f64> {
    if nodes == 0 {
        return Err(domain("quadrature needs at least one node"));
    }
    let s = subset_means(model, params, seq)?;
    let n = s.len() - 1;
    let h = 1.0 / nodes as f64;
    let mut total = 0.0;
    for i in 0..nodes {
        let t = (i as f64 + 0.5) * h;
        let mut g = 0.0;
        for (l, sl) in s.iter().enumerate().skip(1) {
            // t^(l-1) absorbs the 1/t factor
            g += binomial(n, l) * t.powi(l as i32 - 1) * (1.0 - t).powi((n - l) as i32) * sl;
        }
        total += g * h;
    }
    Ok(total)
}

/// Log-likelihood of the completion under the order-averaged sampling
/// process that reveals one token at a time.
///
/// With `f(U) = sum_{i not in U} p(y^i | U revealed) f(U + i)` and
/// `f(all) = 1`, the likelihood is `f({}) / L!`.
pub fn exact_loglik(model: &Denoiser, params: &ParameterSet, seq: &TokenSequence) -> Result<f64> {
    if seq.len() > MAX_LOGLIK_LEN {
        return Err(Error::Capacity(format!(
            "order enumeration supports L <= {MAX_LOGLIK_LEN}, got {}",
            seq.len()
        )));
    }
    let n = seq.num_eligible();
    let full = (1u32 << n) - 1;
    // index = set of revealed slots; the masked set is its complement
    let revealed: Vec<u32> = (0..full).collect();
    let masks: Vec<u32> = revealed.iter().map(|u| full & !u).collect();
    let rows = clean_logps(model, params, seq, &masks)?;
    let mut f = vec![0.0; (full + 1) as usize];
    for u in (0..full).rev() {
        let row = &rows[u as usize];
        let terms: Vec<f64> = slots(full & !u).map(|i| row[i] + f[(u | (1 << i)) as usize]).collect();
        f[u as usize] = log_sum_exp(&terms);
    }
    let log_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
    Ok(f[0] - log_fact)
}

/// A softmax policy over a finite outcome set `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub weights: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(domain("policy needs at least one outcome"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(domain("policy weights must be finite"));
        }
        Ok(Self { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let z = log_sum_exp(&self.weights);
        self.weights.iter().map(|w| w - z).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }
}

/// `sum_y pi_theta(y) * grad_theta k(y)` with the sampling weights held
/// fixed, where `k(y)` is the estimator evaluated at
/// `d = log pi_theta(y) - log pi_ref(y)`.
pub fn tabular_kl_grad_expectation(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    estimator: KlEstimator,
) -> Result<Vec<f64>> {
    if theta.len() != reference.len() {
        return Err(domain(format!(
            "outcome sets differ: {} vs {}",
            theta.len(),
            reference.len()
        )));
    }
    let n = theta.len();
    let mut params = ParameterSet::new();
    params.insert("w", &[1, n], theta.weights.clone())?;
    let mut g = Graph::new();
    let b = g.bind(&params);
    let logp = g.log_softmax(b.get(0));
    let lref = g.input(reference.log_probs(), Shape::new(1, n));
    let d = g.sub(logp, lref);
    let term = crate::objective::kl_graph(&mut g, d, estimator);
    let loss = g.segment_sum(term, theta.probs(), vec![0; n], 1);
    Ok(g.backward(loss)?.array(0).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenoiserConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> (Denoiser, ParameterSet) {
        let mut cfg = DenoiserConfig::new(6, 8, 1, 2, 8);
        cfg.init_std = 0.6;
        let m = Denoiser::new(cfg).unwrap();
        let p = m.init(&mut ChaCha8Rng::seed_from_u64(seed));
        (m, p)
    }

    fn logp_clean(m: &Denoiser, p: &ParameterSet, s: &TokenSequence, masked: &[usize], k: usize) -> f64 {
        let toks = s.tokens_with_masks(masked);
        let t = crate::nn::forward_logits(m, p, &toks, s.prompt().len()).unwrap();
        t.row(s.prompt().len() + k)[s.completion()[k] as usize]
    }

    #[test]
    fn length_one_collapses() {
        let (m, p) = tiny(1);
        let s = TokenSequence::new(vec![2, 3], vec![4]).unwrap();
        let direct = logp_clean(&m, &p, &s, &[0], 0);
        assert!((exact_elbo(&m, &p, &s).unwrap() - direct).abs() < 1e-12);
        assert!((exact_loglik(&m, &p, &s).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn length_two_hand_expansion() {
        let (m, p) = tiny(2);
        let s = TokenSequence::new(vec![5], vec![3, 2]).unwrap();
        let a = logp_clean(&m, &p, &s, &[0], 0);
        let b = logp_clean(&m, &p, &s, &[1], 1);
        let both = logp_clean(&m, &p, &s, &[0, 1], 0) + logp_clean(&m, &p, &s, &[0, 1], 1);
        // l = 1: weight 2/1 averaged over two masks; l = 2: weight 1; times 1/L
        let hand = 0.5 * ((2.0 * a + 2.0 * b) / 2.0 + both);
        assert!((exact_elbo(&m, &p, &s).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn size_guards() {
        let (m, p) = tiny(3);
        let s9 = TokenSequence::new(vec![], vec![2; 9]).unwrap();
        assert!(matches!(exact_elbo(&m, &p, &s9), Err(Error::Capacity(_))));
        let s6 = TokenSequence::new(vec![], vec![2; 6]).unwrap();
        assert!(matches!(exact_loglik(&m, &p, &s6), Err(Error::Capacity(_))));
    }

    #[test]
    fn quadrature_matches_enumeration() {
        let (m, p) = tiny(4);
        let s = TokenSequence::new(vec![2], vec![3, 5, 4, 2]).unwrap();
        let e = exact_elbo(&m, &p, &s).unwrap();
        let q = elbo_by_quadrature(&m, &p, &s, 10_000).unwrap();
        assert!((e - q).abs() < 1e-6, "{e} vs {q}");
    }

    #[test]
    fn tabular_rejects_mismatch() {
        let a = TabularPolicy::new(vec![0.0, 1.0]).unwrap();
        let b = TabularPolicy::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert!(tabular_kl_grad_expectation(&a, &b, KlEstimator::K1).is_err());
        let s: f64 = b.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
