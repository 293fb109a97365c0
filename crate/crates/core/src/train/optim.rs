//! Adaptive-moment optimizer with decoupled weight decay, and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::nn::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParameterSet) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update with bias-corrected moments:
    ///
    /// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`
    pub fn step(&mut self, params: &mut ParameterSet, grad: &ParameterSet) -> Result<()> {
        if !params.same_layout(grad) || !params.same_layout(&self.m) {
            return Err(domain("gradient layout does not match parameters"));
        }
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        params.update(|i, theta| {
            let g = &grad.array(i).data;
            let mi = m.data_mut(i);
            for (mk, gk) in mi.iter_mut().zip(g) {
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
            }
            let vi = v.data_mut(i);
            for (vk, gk) in vi.iter_mut().zip(g) {
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
            }
            let (mi, vi) = (&m.array(i).data, &v.array(i).data);
            for k in 0..theta.len() {
                theta[k] *= 1.0 - lr * weight_decay;
                theta[k] -= lr * (mi[k] / c1) / ((vi[k] / c2).sqrt() + eps);
            }
        });
        Ok(())
    }

    /// Moments as named arrays (`opt.m.*`, `opt.v.*`, `opt.t`) for checkpoints.
    pub fn state_arrays(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (prefix, set) in [("opt.m.", &self.m), ("opt.v.", &self.v)] {
            for a in set.arrays() {
                out.insert(&format!("{prefix}{}", a.name), &a.shape, a.data.clone())
                    .expect("prefixed names are unique");
            }
        }
        out.insert("opt.t", &[1], vec![self.t as f64]).expect("unique name");
        out
    }
}

/// Scales `grad` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grad: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = grad.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.update(|_, d| d.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("x", &[1], vec![x]).unwrap();
        p
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // quadratic 0.5 * (x - 3)^2 at x = 1: gradient -2
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = one(1.0);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &one(-2.0)).unwrap();
        let m_hat = (0.1 * -2.0) / (1.0 - 0.9);
        let v_hat = (0.01 * 4.0) / (1.0 - 0.99);
        let expected = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.array(0).data[0] - expected).abs() < 1e-15);
        // second step
        opt.step(&mut p, &one(-1.0)).unwrap();
        let m2: f64 = 0.9 * (0.1 * -2.0) + 0.1 * -1.0;
        let v2: f64 = 0.99 * (0.01 * 4.0) + 0.01 * 1.0;
        let e2 = expected * (1.0 - 0.001) - 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9801)).sqrt() + 1e-8);
        assert!((p.array(0).data[0] - e2).abs() < 1e-14);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut p = one(2.5);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                weight_decay: 0.1,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..5 {
            opt.step(&mut p, &one(0.7)).unwrap();
        }
        assert_eq!(p.array(0).data[0], 2.5);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = ParameterSet::new();
        g.insert("a", &[2], vec![3.0, 4.0]).unwrap();
        g.insert("b", &[1], vec![12.0]).unwrap();
        let pre = clip_grad_norm(&mut g, 0.2);
        assert_eq!(pre, 13.0);
        assert!(g.global_norm() <= 0.2 + 1e-9);
        let mut small = one(0.1);
        clip_grad_norm(&mut small, 0.2);
        assert_eq!(small.array(0).data[0], 0.1);
    }
}
