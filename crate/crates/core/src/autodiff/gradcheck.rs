//! Central finite-difference gradient checking.
//!
//! The numerical side only ever calls the forward function, so it stays
//! independent of the tape's backward rules.

use super::params::ParameterSet;
use super::tape::Gradients;
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `run` with central differences
/// of its loss, for every scalar in `params`.
pub fn check_gradients<F>(params: &ParameterSet, run: F) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet) -> Result<(f64, Gradients)>,
{
    check_gradients_strided(params, 1, run)
}

/// Like [`check_gradients`] but only probes every `stride`-th scalar of each
/// parameter (always including the first).
pub fn check_gradients_strided<F>(
    params: &ParameterSet,
    stride: usize,
    run: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = run(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for id in params.ids() {
        let n = params.value(id).len();
        for k in (0..n).step_by(stride.max(1)) {
            let orig = params.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let (plus, _) = run(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let (minus, _) = run(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
