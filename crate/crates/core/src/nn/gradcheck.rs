//! Central finite-difference checks of analytic gradients.

use super::Param;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic|| + ||numeric||, floor)` over the
    /// probed entries. See [`SCALE_FLOOR`] for the floor.
    pub rel_error: f64,
    pub probed: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Absolute lower bound of the error denominator.
pub const NORM_FLOOR: f64 = 1e-10;

/// Fraction of the largest per-tensor gradient norm used as the error
/// denominator floor. Tensors whose true gradient is zero (convolution
/// biases followed by batch norm) are then judged against the scale of the
/// whole check instead of comparing rounding noise with rounding noise.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Compares the analytic gradient left in [`Param::grad`] by `backward` with
/// central differences of `loss`.
///
/// `params` must return the same parameters in the same order on every
/// call. At most `max_entries` evenly spaced entries per tensor are probed.
pub fn check<S>(
    state: &mut S,
    params: &mut dyn for<'a> FnMut(&'a mut S) -> Vec<&'a mut Param<f64>>,
    loss: &mut dyn FnMut(&mut S) -> f64,
    backward: &mut dyn FnMut(&mut S),
    eps: f64,
    max_entries: usize,
) -> Vec<GradReport> {
    for p in params(state) {
        p.zero_grad();
    }
    backward(state);
    let analytic: Vec<(String, Vec<f64>)> = params(state)
        .into_iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    let mut raw = Vec::with_capacity(analytic.len());
    for (t, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let step = n.div_ceil(max_entries.max(1)).max(1);
        let (mut diff, mut an, mut nu, mut probed) = (0.0, 0.0, 0.0, 0);
        for i in (0..n).step_by(step) {
            let orig = params(state)[t].value[i];
            params(state)[t].value[i] = orig + eps;
            let lp = loss(state);
            params(state)[t].value[i] = orig - eps;
            let lm = loss(state);
            params(state)[t].value[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            diff += (grad[i] - num).powi(2);
            an += grad[i].powi(2);
            nu += num.powi(2);
            probed += 1;
        }
        raw.push((name.clone(), diff.sqrt(), an.sqrt(), nu.sqrt(), probed));
    }
    let scale = raw.iter().map(|r| r.2 + r.3).fold(0.0, f64::max);
    let floor = (SCALE_FLOOR * scale).max(NORM_FLOOR);
    raw.into_iter()
        .map(|(name, diff, an, nu, probed)| GradReport {
            name,
            rel_error: diff / (an + nu).max(floor),
            probed,
            analytic_norm: an,
            numeric_norm: nu,
        })
        .collect()
}

pub fn worst(reports: &[GradReport]) -> Option<&GradReport> {
    reports.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
}
