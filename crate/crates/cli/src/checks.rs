//! Statistical and exact checks of the likelihood estimators against the
//! brute-force oracles, on random tiny denoisers.

use espo_core::mdm::{draw_plan_l, draw_plan_t, estimate_many, DrawPlan, EstimatorForm, TokenSequence};
use espo_core::nn::{Denoiser, DenoiserConfig, ParameterSet};
use espo_core::objective::KlEstimator;
use espo_core::oracle::{elbo_by_quadrature, exact_elbo, exact_loglik, tabular_kl_grad_expectation, TabularPolicy};
use espo_core::variance::draw_plan;
use espo_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const TINY_VOCAB: usize = 6;

/// How many instances pass a property, against how many must.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    pub required: usize,
    /// Largest deviation seen, in the property's own units.
    pub worst: f64,
}

impl PropertyResult {
    pub fn ok(&self) -> bool {
        self.passed >= self.required
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}/{} (need {}, worst {:.3e})",
            if self.ok() { "PASS" } else { "FAIL" },
            self.name,
            self.passed,
            self.total,
            self.required,
            self.worst
        )
    }
}

/// A random denoiser over a six-token vocabulary and a sequence for it.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub model: Denoiser,
    pub params: ParameterSet,
    pub seq: TokenSequence,
}

/// Fresh tiny instance; `len` fixes the completion length, otherwise it is
/// drawn from `1..=max_len`.
pub fn tiny_instance(rng: &mut ChaCha8Rng, len: Option<usize>, max_len: usize) -> Result<TinyInstance> {
    let mut cfg = DenoiserConfig::new(TINY_VOCAB, 8, 1, 2, 8);
    cfg.init_std = rng.random_range(0.1..0.5);
    let model = Denoiser::new(cfg)?;
    let params = model.init(rng);
    let l = len.unwrap_or_else(|| rng.random_range(1..=max_len));
    let p = rng.random_range(0..=2);
    let tok = |rng: &mut ChaCha8Rng| rng.random_range(2..TINY_VOCAB as u32);
    let prompt = (0..p).map(|_| tok(rng)).collect();
    let completion = (0..l).map(|_| tok(rng)).collect();
    let seq = TokenSequence::new(prompt, completion)?;
    Ok(TinyInstance { model, params, seq })
}

fn required(total: usize, frac: f64) -> usize {
    (total as f64 * frac).ceil() as usize
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn single(inst: &TinyInstance, params: &ParameterSet, plan: &DrawPlan) -> Result<Vec<f64>> {
    Ok(estimate_many(&inst.model, params, &[(&inst.seq, plan)])?
        .remove(0)
        .sample_values)
}

/// Scale of a check run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckScale {
    pub instances: usize,
    /// Fixed completion length, or `None` for random lengths up to `max_len`.
    pub len: Option<usize>,
    pub max_len: usize,
    pub draws: usize,
    pub replications: usize,
    pub seed: u64,
}

/// The l-form and coupled estimators are within four standard errors of
/// the exact ELBO.
pub fn elbo_unbiasedness(scale: &CheckScale, frac: f64) -> Result<[PropertyResult; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(scale.seed);
    let mut pass = [0usize; 2];
    let mut worst = [0.0f64; 2];
    for _ in 0..scale.instances {
        let inst = tiny_instance(&mut rng, scale.len, scale.max_len)?;
        let exact = exact_elbo(&inst.model, &inst.params, &inst.seq)?;
        let plans = [
            draw_plan_l(&inst.seq, scale.draws, &mut rng)?,
            draw_plan(EstimatorForm::Coupled, &inst.seq, scale.draws, &mut rng)?,
        ];
        for (k, plan) in plans.iter().enumerate() {
            let est = estimate_many(&inst.model, &inst.params, &[(&inst.seq, plan)])?.remove(0);
            let se = est.std_error();
            // deviation in standard errors beyond the absolute slack
            let excess = ((est.value - exact).abs() - 1e-9).max(0.0);
            let z = match (excess > 0.0, se > 0.0) {
                (false, _) => 0.0,
                (true, true) => excess / se,
                (true, false) => f64::INFINITY,
            };
            worst[k] = worst[k].max(z);
            if z <= 4.0 {
                pass[k] += 1;
            }
        }
    }
    let mk = |name: &str, k: usize| PropertyResult {
        name: name.into(),
        passed: pass[k],
        total: scale.instances,
        required: required(scale.instances, frac),
        worst: worst[k],
    };
    Ok([mk("l-form mean within 4 SE", 0), mk("coupled mean within 4 SE", 1)])
}

/// The exact ELBO never exceeds the exact log-likelihood.
pub fn variational_bound(scale: &CheckScale) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(scale.seed ^ 0xb0);
    let mut passed = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..scale.instances {
        let inst = tiny_instance(&mut rng, scale.len, scale.max_len)?;
        let gap =
            exact_elbo(&inst.model, &inst.params, &inst.seq)? - exact_loglik(&inst.model, &inst.params, &inst.seq)?;
        worst = worst.max(gap);
        if gap <= 0.0 {
            passed += 1;
        }
    }
    Ok(PropertyResult {
        name: "ELBO <= log-likelihood".into(),
        passed,
        total: scale.instances,
        required: scale.instances,
        worst,
    })
}

/// Midpoint quadrature over the masking rate agrees with subset
/// enumeration.
pub fn quadrature_agreement(scale: &CheckScale) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(scale.seed ^ 0x9d);
    let mut passed = 0;
    let mut worst = 0.0f64;
    for _ in 0..scale.instances {
        let inst = tiny_instance(&mut rng, scale.len, scale.max_len)?;
        let a = exact_elbo(&inst.model, &inst.params, &inst.seq)?;
        let b = elbo_by_quadrature(&inst.model, &inst.params, &inst.seq, 4000)?;
        let err = (a - b).abs();
        worst = worst.max(err);
        if err <= 1e-6 {
            passed += 1;
        }
    }
    Ok(PropertyResult {
        name: "quadrature matches enumeration".into(),
        passed,
        total: scale.instances,
        required: scale.instances,
        worst,
    })
}

/// Variance orderings: l-form below t-form, shared-draw differences below
/// independent ones, and a coupled pair below two independent draws of the
/// uniform-`l` estimator it couples.
pub fn variance_claims(scale: &CheckScale, fracs: [f64; 3]) -> Result<[PropertyResult; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(scale.seed ^ 0x7a);
    let r = scale.replications;
    let mut pass = [0usize; 3];
    let mut worst = [0.0f64; 3];
    for _ in 0..scale.instances {
        let inst = tiny_instance(&mut rng, scale.len, scale.max_len)?;

        let vl = variance(&single(&inst, &inst.params, &draw_plan_l(&inst.seq, r, &mut rng)?)?);
        let vt = variance(&single(&inst, &inst.params, &draw_plan_t(&inst.seq, r, &mut rng)?)?);

        let mut other = inst.params.clone();
        other.update(|_, xs| xs.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05)));
        let shared = draw_plan_l(&inst.seq, r, &mut rng)?;
        let a = single(&inst, &inst.params, &shared)?;
        let b = single(&inst, &other, &shared)?;
        let b_indep = single(&inst, &other, &draw_plan_l(&inst.seq, r, &mut rng)?)?;
        let d_shared: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let d_indep: Vec<f64> = a.iter().zip(&b_indep).map(|(x, y)| x - y).collect();
        let vs = variance(&d_shared);
        let vi = variance(&d_indep);

        let coupled = single(
            &inst,
            &inst.params,
            &draw_plan(EstimatorForm::Coupled, &inst.seq, r, &mut rng)?,
        )?;
        // Independent draws of the estimator the coupled pair is built from:
        // l ~ U{0..L} with weight (L+1)/l and nothing at l = 0. Given l > 0
        // that is an l-form draw rescaled by (L+1)/L.
        let n = inst.seq.num_eligible() as f64;
        let singles = single(&inst, &inst.params, &draw_plan_l(&inst.seq, 2 * r, &mut rng)?)?;
        let uniform: Vec<f64> = singles
            .iter()
            .map(|x| {
                if rng.random_range(0..=inst.seq.num_eligible()) == 0 {
                    0.0
                } else {
                    x * (n + 1.0) / n
                }
            })
            .collect();
        let pairs: Vec<f64> = uniform.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect();
        let vc = variance(&coupled);
        let vp = variance(&pairs);

        for (k, (lo, hi)) in [(vl, vt), (vs, vi), (vc, vp)].into_iter().enumerate() {
            let excess = lo - hi;
            worst[k] = worst[k].max(excess);
            if lo <= hi + 1e-15 {
                pass[k] += 1;
            }
        }
    }
    let names = [
        "l-form variance <= t-form variance",
        "shared-draw difference variance <= independent",
        "coupled pair variance <= two independent draws",
    ];
    Ok(std::array::from_fn(|k| PropertyResult {
        name: names[k].into(),
        passed: pass[k],
        total: scale.instances,
        required: required(scale.instances, fracs[k]),
        worst: worst[k],
    }))
}

/// Expected detached gradients of the KL estimators on random tabular
/// policy pairs: k1 vanishes, k2 matches `E[d grad log pi]` (the gradient
/// of KL(theta || ref)), and k3 matches the gradient of KL(ref || theta),
/// which is `pi_theta - pi_ref` for softmax weights.
pub fn kl_gradient_facts(pairs: usize, seed: u64) -> Result<[PropertyResult; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pass = [0usize; 3];
    let mut worst = [0.0f64; 3];
    let tol = [1e-12, 1e-10, 1e-8];
    for _ in 0..pairs {
        let n = rng.random_range(2..=8);
        let mut w = || (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let theta = TabularPolicy::new(w())?;
        let reference = TabularPolicy::new(w())?;
        let p = theta.probs();
        let q = reference.probs();
        let d: Vec<f64> = theta
            .log_probs()
            .iter()
            .zip(reference.log_probs())
            .map(|(a, b)| a - b)
            .collect();
        let mean_d: f64 = p.iter().zip(&d).map(|(pi, di)| pi * di).sum();
        let expect = [
            vec![0.0; n],
            (0..n).map(|j| p[j] * (d[j] - mean_d)).collect::<Vec<_>>(),
            (0..n).map(|j| p[j] - q[j]).collect::<Vec<_>>(),
        ];
        for (k, est) in [KlEstimator::K1, KlEstimator::K2, KlEstimator::K3]
            .into_iter()
            .enumerate()
        {
            let g = tabular_kl_grad_expectation(&theta, &reference, est)?;
            let err = g.iter().zip(&expect[k]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst[k] = worst[k].max(err);
            if err <= tol[k] {
                pass[k] += 1;
            }
        }
    }
    let names = [
        "k1 expected gradient vanishes",
        "k2 gradient matches closed form",
        "k3 gradient matches KL(ref || theta) gradient",
    ];
    Ok(std::array::from_fn(|k| PropertyResult {
        name: names[k].into(),
        passed: pass[k],
        total: pairs,
        required: pairs,
        worst: worst[k],
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_models_stay_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inst = tiny_instance(&mut rng, Some(4), 4).unwrap();
        assert!(inst.params.num_scalars() <= 5000, "{}", inst.params.num_scalars());
        assert_eq!(inst.seq.completion().len(), 4);
    }

    #[test]
    fn kl_facts_hold_on_a_few_pairs() {
        for r in kl_gradient_facts(5, 3).unwrap() {
            assert!(r.ok(), "{}", r.line());
        }
    }
}
