//! Finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use super::params::ParamStore;
use super::tensor::{DType, Tensor};
use crate::error::{config_err, Error, Result};

/// Denominator floor of [`relative_error`]. Below this magnitude the error is
/// effectively absolute, since central differences of an O(1) loss carry
/// round-off near `1e-10` regardless of how small the true derivative is.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central differences of `f` at `x`, one element at a time.
pub fn central_difference(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.to_dtype(DType::F64);
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    /// Maximum relative error over the elements of each parameter.
    pub per_param: BTreeMap<String, f64>,
    pub worst_param: String,
    pub worst_index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked_values: usize,
}

impl GradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    /// Parameters whose error reaches `tolerance`.
    pub fn flagged(&self, tolerance: f64) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|(_, &e)| e >= tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Compares the analytic gradients returned by `loss_fn` against central
/// differences for every element of every parameter in `params`.
///
/// `loss_fn` must be deterministic and compute in 64-bit; it returns the
/// loss together with gradients named like `params`.
pub fn grad_check<F>(mut loss_fn: F, params: &ParamStore, eps: f64) -> Result<GradReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, ParamStore)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(config_err!("grad_check eps {eps} outside [1e-6, 1e-3]"));
    }
    let mut probe: ParamStore = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.to_dtype(DType::F64)))
        .collect();
    let (loss0, analytic) = loss_fn(&probe)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric("loss is not finite at the base point".into()));
    }

    let names: Vec<String> = probe.names().map(str::to_string).collect();
    let mut report = GradReport {
        per_param: BTreeMap::new(),
        worst_param: String::new(),
        worst_index: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked_values: 0,
    };
    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| config_err!("no analytic gradient for `{name}`"))?
            .clone();
        let n = probe.get(name).unwrap().len();
        if grad.len() != n {
            return Err(config_err!("gradient for `{name}` has the wrong size"));
        }
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = probe.get(name).unwrap().data()[i];
            let mut eval = |v: f64, probe: &mut ParamStore| -> Result<f64> {
                probe.get_mut(name).unwrap().data_mut()[i] = v;
                let (l, _) = loss_fn(probe)?;
                if !l.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is not finite when perturbing `{name}`[{i}]"
                    )));
                }
                Ok(l)
            };
            let up = eval(orig + eps, &mut probe)?;
            let down = eval(orig - eps, &mut probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked_values += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            worst = worst.max(rel);
        }
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}
