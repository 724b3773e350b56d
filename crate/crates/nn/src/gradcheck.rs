//! Central finite-difference verification of analytic gradients.

use crate::dropout::splitmix64;
use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Check at most this many coordinates per parameter tensor, chosen
    /// deterministically from `seed`. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree: the function is not
    /// differentiable there and the relative error is meaningless.
    pub kinks: Vec<Coordinate>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.kinks.is_empty() && self.max_rel_error < tol
    }
}

fn eval_scalar<F, E>(params: &ParamStore<f64>, f: &F) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph<'_, f64>) -> std::result::Result<Var, E>,
    E: From<NnError>,
{
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(NnError::ShapeMismatch {
            op: "grad_check",
            detail: format!("objective must be scalar, got {:?}", v.shape()),
        }
        .into());
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(NnError::NonFiniteValue("objective".into()).into());
    }
    Ok(x)
}

fn pick_coords(len: usize, limit: Option<usize>, seed: u64, salt: usize) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut chosen = Vec::with_capacity(k);
            let mut state = splitmix64(seed ^ (salt as u64).wrapping_mul(0x9E37_79B9));
            while chosen.len() < k {
                state = splitmix64(state);
                let idx = (state % len as u64) as usize;
                if !chosen.contains(&idx) {
                    chosen.push(idx);
                }
            }
            chosen.sort_unstable();
            chosen
        }
        _ => (0..len).collect(),
    }
}

/// Compares the reverse-mode gradient of the scalar built by `f` with
/// central differences over the parameters of `params`.
pub fn grad_check<F>(params: &ParamStore<f64>, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_with(params, opts, f)
}

/// [`grad_check`] for objectives with their own error type.
pub fn grad_check_with<F, E>(params: &ParamStore<f64>, opts: &GradCheckOptions, f: F) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>) -> std::result::Result<Var, E>,
    E: From<NnError>,
{
    let f0 = eval_scalar(params, &f)?;
    let grads = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    if !grads.is_finite() {
        return Err(NnError::NonFiniteValue("analytic gradient".into()).into());
    }
    let h = opts.h;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: Vec::new(),
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let len = params.value(id).len();
        let zero = Tensor::zeros(params.value(id).shape().to_vec());
        let analytic_t = grads.get(id).unwrap_or(&zero);
        for idx in pick_coords(len, opts.max_coords_per_param, opts.seed, id.index()) {
            let orig = params.value(id).data()[idx];
            work.value_mut(id).data_mut()[idx] = orig + h;
            let fp = eval_scalar(&work, &f)?;
            work.value_mut(id).data_mut()[idx] = orig - h;
            let fm = eval_scalar(&work, &f)?;
            work.value_mut(id).data_mut()[idx] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let analytic = analytic_t.data()[idx];
            let coord = || Coordinate {
                param: params.name(id).to_string(),
                index: idx,
                analytic,
                numeric,
            };
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if (fwd - bwd).abs() > (0.5 * fwd.abs().max(bwd.abs())).max(1e-3) {
                report.kinks.push(coord());
            }
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some(coord());
                }
            }
        }
    }
    Ok(report)
}
