use super::ParameterSet;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest [`relative_error`] over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Denominator floor of [`relative_error`]. Central differences with
/// [`FD_STEP`] carry roundoff near 1e-11, so gradients much smaller than this
/// floor are effectively compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

/// `2|a - n| / (|a| + |n| + REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    2.0 * (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of the scalar function `f`
/// at `x`, one coordinate at a time.
pub fn finite_difference_check<F>(mut f: F, x: &[f64], analytic: &[f64], tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "one analytic entry per coordinate");
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: x.len(),
        tolerance,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let plus = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let minus = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

/// Gradient check over every scalar of a parameter set. `loss` evaluates the
/// scalar objective for a given set; `analytic` must already hold the gradient
/// of that objective in the set's grad buffers.
pub fn check_parameters<F>(params: &ParameterSet, mut loss: F, tolerance: f64) -> GradCheckReport
where
    F: FnMut(&ParameterSet) -> f64,
{
    let x = params.flat_values();
    let analytic = params.flat_grads();
    let mut scratch = params.clone();
    finite_difference_check(
        |v| {
            scratch.set_flat_values(v).expect("same layout");
            loss(&scratch)
        },
        &x,
        &analytic,
        tolerance,
    )
}
