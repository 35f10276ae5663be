use super::params::{GradMap, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Result of comparing autodiff gradients to central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Element-wise relative error `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the gradient returned by `loss_fn` against central differences
/// for every element of every parameter; returns the maximum relative error.
pub fn finite_difference_check<F>(loss_fn: F, params: &mut ParamStore, eps: f64) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, GradMap)>,
{
    Ok(finite_difference_check_sampled(loss_fn, params, eps, usize::MAX, |_| true)?.max_rel_error)
}

/// As [`finite_difference_check`], probing at most `per_tensor` evenly
/// spaced elements of each selected parameter.
pub fn finite_difference_check_sampled<F, S>(
    mut loss_fn: F,
    params: &mut ParamStore,
    eps: f64,
    per_tensor: usize,
    select: S,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, GradMap)>,
    S: Fn(ParamId) -> bool,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite difference eps must be > 0, got {eps}")));
    }
    let (v1, grads) = loss_fn(params)?;
    let (v2, _) = loss_fn(params)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Nondeterministic {
            first: v1,
            second: v2,
        });
    }

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().filter(|&id| select(id)).collect();
    for id in ids {
        let n = params.get(id).numel();
        let k = per_tensor.min(n);
        for s in 0..k {
            let idx = s * n / k;
            let orig = params.get(id).data()[idx];
            params.get_mut(id).data_mut()[idx] = orig + eps;
            let plus = loss_fn(params)?.0;
            params.get_mut(id).data_mut()[idx] = orig - eps;
            let minus = loss_fn(params)?.0;
            params.get_mut(id).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grads.get(id).data()[idx], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), idx));
            }
        }
    }
    Ok(report)
}
