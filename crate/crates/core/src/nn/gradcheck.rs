//! Central finite-difference gradient checking.

use super::ParamVector;

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Returns the worst per-coordinate relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`; the caller decides what is acceptable.
pub fn finite_difference_check<F>(
    mut loss: F,
    params: &ParamVector,
    analytic: &ParamVector,
    h: f64,
) -> f64
where
    F: FnMut(&ParamVector) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert!(
        params.same_layout(analytic),
        "analytic gradient layout differs"
    );
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let x = params.values()[i];
        probe.values_mut()[i] = x + h;
        let up = loss(&probe);
        probe.values_mut()[i] = x - h;
        let down = loss(&probe);
        probe.values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.values()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
