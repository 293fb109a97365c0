//! Policy-optimization surrogates: group advantages, importance ratios under
//! four likelihood approximations, the clipped surrogate, and KL estimators.
//!
//! Scalar functions mirror the graph-building [`policy_loss`], which is what
//! the trainer differentiates. Only the current policy's likelihood carries
//! gradient; cached old and reference values enter as constants.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::mdm::{build_elbo_graph, build_meanfield_graph, DrawPlan, ElboEstimate, TokenSequence};
use crate::nn::{Bound, Denoiser, Graph, Var};
use crate::vocab::Token;

/// `ln` of the largest finite half-precision value. Log-ratios beyond it
/// cannot be represented in the 16-bit arithmetic common in large-model
/// training, so they are flagged as overflow risks.
pub const OVERFLOW_LOG_THRESHOLD: f64 = 11.089_866_488_461_016;

/// Which likelihood approximation and ratio granularity a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Per-token ratios of fully-masked single-token probabilities.
    TokenMeanfield,
    /// Length-normalized sequence ratio of the mean-field log-likelihood.
    SeqMeanfield,
    /// Per-token ratios of ELBO contributions.
    TokenElbo,
    /// Length-normalized sequence ratio of ELBOs.
    SeqElbo,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::TokenMeanfield,
        Variant::SeqMeanfield,
        Variant::TokenElbo,
        Variant::SeqElbo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TokenMeanfield => "token-meanfield",
            Variant::SeqMeanfield => "seq-meanfield",
            Variant::TokenElbo => "token-elbo",
            Variant::SeqElbo => "seq-elbo",
        }
    }

    pub fn uses_meanfield(self) -> bool {
        matches!(self, Variant::TokenMeanfield | Variant::SeqMeanfield)
    }

    pub fn is_token_level(self) -> bool {
        matches!(self, Variant::TokenMeanfield | Variant::TokenElbo)
    }
}

/// Single-sample KL estimators applied to `d = L_theta - L_ref`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    None,
    /// `d`
    K1,
    /// `d^2 / 2`
    K2,
    /// `exp(-d) - 1 + d`
    K3,
}

impl KlEstimator {
    pub fn name(self) -> &'static str {
        match self {
            KlEstimator::None => "none",
            KlEstimator::K1 => "k1",
            KlEstimator::K2 => "k2",
            KlEstimator::K3 => "k3",
        }
    }
}

/// How log-ratios of sequence likelihoods are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LengthNorm {
    /// Divide by the configured completion length.
    #[default]
    FixedL,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub clip_eps: f64,
    pub kl: KlEstimator,
    pub beta: f64,
    #[serde(default)]
    pub length_norm: LengthNorm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SeqElbo,
            clip_eps: 0.2,
            kl: KlEstimator::K2,
            beta: 0.01,
            length_norm: LengthNorm::FixedL,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return Err(Error::Config(format!(
                "clip_eps must be positive, got {}",
                self.clip_eps
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }

    fn kl_active(&self) -> bool {
        self.kl != KlEstimator::None && self.beta > 0.0
    }
}

/// `R_i - mean(R)`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(domain(format!(
            "a group needs at least 2 completions, got {}",
            rewards.len()
        )));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// An exponentiated log-ratio with saturation flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub log_value: f64,
    /// `|log ratio|` exceeds [`OVERFLOW_LOG_THRESHOLD`].
    pub overflow_risk: bool,
    /// The ratio is not representable in double precision (`+inf` or `0`).
    pub saturated: bool,
}

impl Ratio {
    pub fn from_log(log_value: f64) -> Self {
        let value = log_value.exp();
        Self {
            value,
            log_value,
            overflow_risk: log_value.abs() > OVERFLOW_LOG_THRESHOLD,
            saturated: value.is_infinite() || value == 0.0,
        }
    }

    /// True when either flag is raised.
    pub fn flagged(&self) -> bool {
        self.overflow_risk || self.saturated
    }
}

fn check_shared(new: &ElboEstimate, old: &ElboEstimate) -> Result<()> {
    if new.plan != old.plan {
        return Err(Error::Consistency(
            "ELBO estimates were not computed on shared draws".into(),
        ));
    }
    Ok(())
}

/// `exp((L_new - L_old) / L)`.
pub fn ratio_seq_elbo(new: &ElboEstimate, old: &ElboEstimate, len: usize) -> Result<Ratio> {
    check_shared(new, old)?;
    if len == 0 {
        return Err(domain("normalization length must be positive"));
    }
    Ok(Ratio::from_log((new.value - old.value) / len as f64))
}

/// `exp(L_new - L_old)`, unnormalized.
pub fn ratio_seq_vanilla(new: &ElboEstimate, old: &ElboEstimate) -> Result<Ratio> {
    check_shared(new, old)?;
    Ok(Ratio::from_log(new.value - old.value))
}

/// `exp(L^k_new - L^k_old)` for 0-based position `k`.
pub fn ratio_token_elbo(new: &ElboEstimate, old: &ElboEstimate, k: usize) -> Result<Ratio> {
    check_shared(new, old)?;
    let a = crate::mdm::per_token_elbo(new, k)?;
    let b = crate::mdm::per_token_elbo(old, k)?;
    Ok(Ratio::from_log(a - b))
}

pub fn ratio_token_meanfield(logp_new: f64, logp_old: f64) -> Ratio {
    Ratio::from_log(logp_new - logp_old)
}

/// Exponentiated per-token average of mean-field log-probability differences.
pub fn ratio_seq_meanfield(logp_new: &[f64], logp_old: &[f64]) -> Result<Ratio> {
    if logp_new.len() != logp_old.len() || logp_new.is_empty() {
        return Err(domain("mean-field vectors must be non-empty and of equal length"));
    }
    let d: f64 = logp_new.iter().zip(logp_old).map(|(a, b)| a - b).sum();
    Ok(Ratio::from_log(d / logp_new.len() as f64))
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

pub fn kl_k1(elbo_theta: f64, elbo_ref: f64) -> f64 {
    elbo_theta - elbo_ref
}

pub fn kl_k2(elbo_theta: f64, elbo_ref: f64) -> f64 {
    0.5 * (elbo_theta - elbo_ref).powi(2)
}

/// Saturates to `+inf` when `L_ref - L_theta` is large; see [`kl_k3_checked`].
pub fn kl_k3(elbo_theta: f64, elbo_ref: f64) -> f64 {
    let r = elbo_ref - elbo_theta;
    r.exp_m1() - r
}

/// [`kl_k3`] plus a flag raised when the value overflowed.
pub fn kl_k3_checked(elbo_theta: f64, elbo_ref: f64) -> (f64, bool) {
    let v = kl_k3(elbo_theta, elbo_ref);
    (v, !v.is_finite())
}

pub fn kl_value(estimator: KlEstimator, elbo_theta: f64, elbo_ref: f64) -> f64 {
    match estimator {
        KlEstimator::None => 0.0,
        KlEstimator::K1 => kl_k1(elbo_theta, elbo_ref),
        KlEstimator::K2 => kl_k2(elbo_theta, elbo_ref),
        KlEstimator::K3 => kl_k3(elbo_theta, elbo_ref),
    }
}

/// Elementwise estimator of `d` on the graph.
pub fn kl_graph(g: &mut Graph, d: Var, estimator: KlEstimator) -> Var {
    match estimator {
        KlEstimator::None => g.scale(d, 0.0),
        KlEstimator::K1 => d,
        KlEstimator::K2 => {
            let sq = g.square(d);
            g.scale(sq, 0.5)
        }
        KlEstimator::K3 => {
            let neg = g.scale(d, -1.0);
            let e = g.exp(neg);
            let e = g.offset(e, -1.0);
            g.add(e, d)
        }
    }
}

/// One prompt's sampled completions with everything the loss needs cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionGroup {
    pub prompt: Vec<Token>,
    pub completions: Vec<TokenSequence>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// ELBO under the rollout policy; its draws are reused for every policy.
    pub old_elbo: Vec<ElboEstimate>,
    /// ELBO under the reference policy on the same draws.
    pub ref_elbo: Vec<ElboEstimate>,
    /// Per-position fully-masked log-probabilities under the rollout policy;
    /// empty when no mean-field variant is in use.
    #[serde(default)]
    pub old_meanfield: Vec<Vec<f64>>,
}

impl CompletionGroup {
    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    /// Shared draws for completion `i`.
    pub fn plan(&self, i: usize) -> &DrawPlan {
        &self.old_elbo[i].plan
    }

    /// Checks sizes, advantage centering, and cache presence for `variant`.
    pub fn validate(&self, variant: Variant) -> Result<()> {
        let g = self.len();
        if g < 2 {
            return Err(domain(format!("a group needs at least 2 completions, got {g}")));
        }
        if self.rewards.len() != g || self.advantages.len() != g {
            return Err(Error::Consistency(
                "rewards or advantages missing for some completions".into(),
            ));
        }
        let s: f64 = self.advantages.iter().sum();
        if s.abs() > 1e-9 {
            return Err(Error::Consistency(format!("advantages sum to {s}, not 0")));
        }
        if self.old_elbo.len() != g || self.ref_elbo.len() != g {
            return Err(Error::Consistency("ELBO caches missing for some completions".into()));
        }
        for (o, r) in self.old_elbo.iter().zip(&self.ref_elbo) {
            check_shared(o, r)?;
        }
        if variant.uses_meanfield() {
            if self.old_meanfield.len() != g {
                return Err(Error::Consistency("mean-field cache missing".into()));
            }
            for (mf, seq) in self.old_meanfield.iter().zip(&self.completions) {
                if mf.len() != seq.len() {
                    return Err(Error::Consistency("mean-field cache has the wrong length".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub loss: f64,
    /// Mean of the ratios entering the surrogate (per sequence or per token).
    pub mean_ratio: f64,
    /// Fraction of those ratios outside the clip band.
    pub clip_frac: f64,
    /// Mean KL estimate across completions; 0 when the penalty is off.
    pub kl: f64,
    /// Largest `|log ratio|` among the surrogate ratios.
    pub max_abs_log_ratio: f64,
}

/// The differentiable loss node and its diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: Var,
    pub diagnostics: Diagnostics,
}

/// Appends the negated clipped objective plus the KL penalty over all
/// completions of `groups` to `g`:
///
/// `loss = -(1/N) sum_i S_i + beta (1/N) sum_i KL_i`
///
/// where `S_i` is the clipped surrogate of completion `i` (for token-level
/// variants, the mean over its positions of per-token surrogates).
pub fn policy_loss(
    g: &mut Graph,
    bound: &Bound,
    model: &Denoiser,
    groups: &[CompletionGroup],
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(domain("no completion groups"));
    }
    for grp in groups {
        grp.validate(cfg.variant)?;
    }
    let seqs: Vec<&TokenSequence> = groups.iter().flat_map(|grp| grp.completions.iter()).collect();
    let adv: Vec<f64> = groups.iter().flat_map(|grp| grp.advantages.iter().copied()).collect();
    let old: Vec<&ElboEstimate> = groups.iter().flat_map(|grp| grp.old_elbo.iter()).collect();
    let refs: Vec<&ElboEstimate> = groups.iter().flat_map(|grp| grp.ref_elbo.iter()).collect();
    let n = seqs.len();
    let inv_n = 1.0 / n as f64;

    let need_elbo = !cfg.variant.uses_meanfield() || cfg.kl_active();
    let elbo = if need_elbo {
        let items: Vec<(&TokenSequence, &DrawPlan)> = seqs.iter().zip(&old).map(|(s, o)| (*s, &o.plan)).collect();
        Some(build_elbo_graph(g, bound, model, &items)?)
    } else {
        None
    };

    // log-ratios, with per-entry advantage and averaging weight
    let (log_ratio, entry_adv, entry_w) = match cfg.variant {
        Variant::SeqElbo => {
            let e = elbo.as_ref().expect("built above");
            let old_v = g.constant_row(old.iter().map(|o| o.value).collect());
            let d = g.sub(e.totals, old_v);
            let lr = g.scale(d, 1.0 / seq_len(&seqs)? as f64);
            (lr, adv.clone(), vec![inv_n; n])
        }
        Variant::SeqMeanfield => {
            let (mf, offsets) = build_meanfield_graph(g, bound, model, &seqs)?;
            let old_flat = flat_meanfield(groups);
            let old_v = g.constant_row(old_flat);
            let d = g.sub(mf, old_v);
            let mut seg = vec![0; g.shape(d).numel()];
            for (i, (s, &o)) in seqs.iter().zip(&offsets).enumerate() {
                seg[o..o + s.len()].fill(i);
            }
            let len = seq_len(&seqs)? as f64;
            let total = seg.len();
            let lr = g.segment_sum(d, vec![1.0 / len; total], seg, n);
            (lr, adv.clone(), vec![inv_n; n])
        }
        Variant::TokenElbo | Variant::TokenMeanfield => {
            let (new_tok, old_flat) = if cfg.variant == Variant::TokenElbo {
                let e = elbo.as_ref().expect("built above");
                let old_flat: Vec<f64> = old.iter().flat_map(|o| o.per_token.iter().copied()).collect();
                (e.per_token, old_flat)
            } else {
                let (mf, _) = build_meanfield_graph(g, bound, model, &seqs)?;
                (mf, flat_meanfield(groups))
            };
            let len = seq_len(&seqs)? as f64;
            let mut idx = Vec::new();
            let mut a = Vec::new();
            let mut w = Vec::new();
            let mut old_sel = Vec::new();
            let mut off = 0;
            for (i, s) in seqs.iter().enumerate() {
                for p in s.eligible() {
                    idx.push(off + p);
                    old_sel.push(old_flat[off + p]);
                    a.push(adv[i]);
                    w.push(inv_n / len);
                }
                off += s.len();
            }
            let picked = g.gather(new_tok, idx);
            let old_v = g.constant_row(old_sel);
            let lr = g.sub(picked, old_v);
            (lr, a, w)
        }
    };

    let ratio = g.exp(log_ratio);
    let ratio = g.name(ratio, "ratio");
    let a = g.constant_row(entry_adv);
    let unclipped = g.mul(ratio, a);
    let clipped = g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let clipped = g.mul(clipped, a);
    let surr = g.min(unclipped, clipped);
    let k = entry_w.len();
    let neg_w: Vec<f64> = entry_w.iter().map(|w| -w).collect();
    let mut loss = g.segment_sum(surr, neg_w, vec![0; k], 1);

    let mut kl_mean = 0.0;
    if cfg.kl_active() {
        let e = elbo.as_ref().expect("built above");
        let ref_v = g.constant_row(refs.iter().map(|r| r.value).collect());
        let d = g.sub(e.totals, ref_v);
        let kl = kl_graph(g, d, cfg.kl);
        let kl = g.name(kl, "kl");
        kl_mean = g.value(kl).iter().sum::<f64>() * inv_n;
        let pen = g.segment_sum(kl, vec![cfg.beta * inv_n; n], vec![0; n], 1);
        loss = g.add(loss, pen);
    }
    let loss = g.name(loss, "loss");

    let lr = g.value(log_ratio);
    let rv = g.value(ratio);
    let lo = 1.0 - cfg.clip_eps;
    let hi = 1.0 + cfg.clip_eps;
    let diagnostics = Diagnostics {
        loss: g.scalar(loss),
        mean_ratio: rv.iter().sum::<f64>() / rv.len().max(1) as f64,
        clip_frac: rv.iter().filter(|&&r| r < lo || r > hi).count() as f64 / rv.len().max(1) as f64,
        kl: kl_mean,
        max_abs_log_ratio: lr.iter().fold(0.0, |m, x| m.max(x.abs())),
    };
    Ok(LossOutput { loss, diagnostics })
}

fn flat_meanfield(groups: &[CompletionGroup]) -> Vec<f64> {
    groups
        .iter()
        .flat_map(|grp| grp.old_meanfield.iter().flat_map(|v| v.iter().copied()))
        .collect()
}

/// The fixed completion length shared by every sequence.
fn seq_len(seqs: &[&TokenSequence]) -> Result<usize> {
    let l = seqs[0].len();
    if seqs.iter().any(|s| s.len() != l) {
        return Err(domain("completions must share one length under fixed-L normalization"));
    }
    Ok(l)
}
