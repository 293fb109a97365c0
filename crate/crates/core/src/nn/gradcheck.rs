//! Central finite-difference verification of tape gradients.

use super::graph::{Bound, Graph, Var};
use super::params::ParameterSet;
use crate::error::{domain, Result};

/// Denominator floor for relative errors, so that coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub array: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst coordinate of every array, in array order.
    pub worst: Vec<CoordinateCheck>,
    /// Every coordinate whose relative error exceeds the tolerance.
    pub flagged: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Builds the loss via `build`, backpropagates, and compares every
/// coordinate against central differences with the given `step`.
pub fn grad_check<F>(params: &ParameterSet, build: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = g.bind(params);
    let loss = build(&mut g, &b)?;
    let analytic = g.backward(loss)?;
    compare_with_finite_differences(params, &analytic, build, step, tolerance)
}

/// Compares a supplied gradient against central differences of `build`.
pub fn compare_with_finite_differences<F>(
    params: &ParameterSet,
    analytic: &ParameterSet,
    build: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(domain("finite-difference step must be positive"));
    }
    if !params.same_layout(analytic) {
        return Err(domain("gradient layout does not match parameters"));
    }
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let loss = build(&mut g, &b)?;
        Ok(g.scalar(loss))
    };
    let mut probe = params.clone();
    let mut worst = Vec::new();
    let mut flagged = Vec::new();
    let mut max_rel: f64 = 0.0;
    for ai in 0..params.len() {
        let name = params.array(ai).name.clone();
        let mut arr_worst: Option<CoordinateCheck> = None;
        for i in 0..params.array(ai).data.len() {
            let orig = params.array(ai).data[i];
            probe.data_mut(ai)[i] = orig + step;
            let up = eval(&probe)?;
            probe.data_mut(ai)[i] = orig - step;
            let down = eval(&probe)?;
            probe.data_mut(ai)[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.array(ai).data[i];
            let check = CoordinateCheck {
                array: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric),
            };
            max_rel = max_rel.max(check.rel_error);
            if check.rel_error > tolerance {
                flagged.push(check.clone());
            }
            if arr_worst.as_ref().is_none_or(|w| check.rel_error > w.rel_error) {
                arr_worst = Some(check);
            }
        }
        if let Some(w) = arr_worst {
            worst.push(w);
        }
    }
    Ok(GradCheckReport {
        worst,
        flagged,
        max_rel_error: max_rel,
        tolerance,
    })
}
