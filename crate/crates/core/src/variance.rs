//! Variance reduction: complementary-mask coupling and draw sharing across
//! parameter sets.
//!
//! A coupled pair draws `l` uniformly from `{0..L}`, masks `l` positions, and
//! pairs it with the complementary mask of the other `L - l` positions, so
//! every token is scored exactly once per pair. Each side is weighted by
//! `(L+1)/l` (zero when empty) and the two sides are averaged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::mdm::elbo::{draw_plan_l, draw_plan_t, estimate_many};
use crate::mdm::sequence::draw_l;
use crate::mdm::{DrawPlan, ElboEstimate, EstimatorForm, TokenSequence};
use crate::nn::{Denoiser, ParameterSet};

/// A mask and its complement over the eligible completion positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoupledDraw {
    pub l: usize,
    /// `l` masked positions, increasing.
    pub primary: Vec<usize>,
    /// The remaining eligible positions, increasing.
    pub complement: Vec<usize>,
}

impl CoupledDraw {
    /// Checks that the two sets partition the eligible positions of `seq`.
    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        if self.primary.len() != self.l {
            return Err(domain(format!(
                "coupled draw declares l = {} but masks {}",
                self.l,
                self.primary.len()
            )));
        }
        let increasing = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.primary) || !increasing(&self.complement) {
            return Err(domain("coupled mask positions must be strictly increasing"));
        }
        let mut union: Vec<usize> = self.primary.iter().chain(&self.complement).copied().collect();
        union.sort_unstable();
        if union != seq.eligible() {
            return Err(domain("coupled masks do not partition the eligible positions"));
        }
        Ok(())
    }
}

/// Draws `l ~ U{0..L}`, a uniform `l`-subset, and its complement.
pub fn draw_coupled<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R) -> CoupledDraw {
    let eligible = seq.eligible();
    let l = rng.random_range(0..=eligible.len());
    let primary = draw_l(seq, l, rng)
        .expect("l never exceeds the eligible count")
        .positions;
    let complement = eligible
        .into_iter()
        .filter(|p| primary.binary_search(p).is_err())
        .collect();
    CoupledDraw { l, primary, complement }
}

pub fn draw_plan_coupled<R: Rng + ?Sized>(seq: &TokenSequence, pairs: usize, rng: &mut R) -> DrawPlan {
    DrawPlan::Coupled((0..pairs).map(|_| draw_coupled(seq, rng)).collect())
}

/// Fresh draws of the requested form; `m` counts pairs for the coupled form.
pub fn draw_plan<R: Rng + ?Sized>(form: EstimatorForm, seq: &TokenSequence, m: usize, rng: &mut R) -> Result<DrawPlan> {
    if m == 0 {
        return Err(domain("need at least one Monte Carlo sample"));
    }
    match form {
        EstimatorForm::TForm => draw_plan_t(seq, m, rng),
        EstimatorForm::LForm => draw_plan_l(seq, m, rng),
        EstimatorForm::Coupled => Ok(draw_plan_coupled(seq, m, rng)),
    }
}

/// Coupled ELBO estimate averaged over `m` pairs.
pub fn coupled_elbo<R: Rng + ?Sized>(
    model: &Denoiser,
    params: &ParameterSet,
    seq: &TokenSequence,
    m: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    let plan = draw_plan(EstimatorForm::Coupled, seq, m, rng)?;
    Ok(estimate_many(model, params, &[(seq, &plan)])?.remove(0))
}

/// ELBO difference between two parameter sets evaluated on one shared set
/// of draws: `(estimate_a - estimate_b, estimate_a, estimate_b)`.
pub fn antithetic_diff<R: Rng + ?Sized>(
    model: &Denoiser,
    params_a: &ParameterSet,
    params_b: &ParameterSet,
    seq: &TokenSequence,
    m: usize,
    form: EstimatorForm,
    rng: &mut R,
) -> Result<(f64, ElboEstimate, ElboEstimate)> {
    let plan = draw_plan(form, seq, m, rng)?;
    let a = estimate_many(model, params_a, &[(seq, &plan)])?.remove(0);
    let b = estimate_many(model, params_b, &[(seq, &plan)])?.remove(0);
    Ok((a.value - b.value, a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenoiserConfig;
    use crate::vocab::PAD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Denoiser, ParameterSet) {
        let mut cfg = DenoiserConfig::new(6, 8, 1, 2, 8);
        cfg.init_std = 0.5;
        let m = Denoiser::new(cfg).unwrap();
        let p = m.init(&mut ChaCha8Rng::seed_from_u64(11));
        (m, p)
    }

    #[test]
    fn pairs_partition_positions() {
        let s = TokenSequence::new(vec![2], vec![3, 4, PAD, 5, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen_extremes = (false, false);
        for _ in 0..400 {
            let d = draw_coupled(&s, &mut rng);
            d.validate(&s).unwrap();
            seen_extremes.0 |= d.l == 0;
            seen_extremes.1 |= d.l == 4;
        }
        assert!(seen_extremes.0 && seen_extremes.1);
    }

    #[test]
    fn length_one_is_exact() {
        let (m, p) = tiny();
        let s = TokenSequence::new(vec![2, 3], vec![4]).unwrap();
        let full = crate::mdm::estimate(
            &m,
            &p,
            &s,
            &DrawPlan::LForm(vec![crate::mdm::MaskDraw {
                level: crate::mdm::MaskLevel::Count(1),
                positions: vec![0],
            }]),
        )
        .unwrap()
        .value;
        for seed in 0..5 {
            let e = coupled_elbo(&m, &p, &s, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((e.value - full).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_draws_cancel_and_antisymmetric() {
        let (m, p) = tiny();
        let mut q = p.clone();
        q.update(|_, d| d.iter_mut().for_each(|x| *x += 0.01));
        let s = TokenSequence::new(vec![2], vec![3, 4, 5]).unwrap();
        for form in [EstimatorForm::TForm, EstimatorForm::LForm, EstimatorForm::Coupled] {
            let (d, _, _) = antithetic_diff(&m, &p, &p, &s, 2, form, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(d, 0.0);
            let (ab, _, _) = antithetic_diff(&m, &p, &q, &s, 2, form, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let (ba, _, _) = antithetic_diff(&m, &q, &p, &s, 2, form, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(ab, -ba);
        }
    }
}
