//! Central finite-difference gradient checking.

use crate::param::Param;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of `f` with respect to `x[i]`.
pub fn numeric_partial(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] = x[i] + h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Largest relative error between `analytic` and the numeric gradient of
/// `f` at `x`, over every coordinate.
pub fn grad_check(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    (0..x.len()).map(|i| relative_error(analytic[i], numeric_partial(f, x, i, h))).fold(0.0, f64::max)
}

/// Indices to probe in a tensor of `len` elements: all of them when
/// `len <= max`, otherwise an evenly strided subset.
pub fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

/// Checks the accumulated gradient of one parameter element by element,
/// re-evaluating `loss` with the element perturbed. Returns the worst
/// relative error over the probed elements.
pub fn check_param<M>(
    model: &mut M,
    get: &dyn Fn(&mut M) -> &mut Param<f64>,
    loss: &dyn Fn(&M) -> f64,
    max_probes: usize,
    h: f64,
) -> f64 {
    let len = get(model).len();
    let mut worst: f64 = 0.0;
    for i in probe_indices(len, max_probes) {
        let analytic = get(model).grad.data()[i];
        let orig = get(model).value.data()[i];
        get(model).value.data_mut()[i] = orig + h;
        let fp = loss(model);
        get(model).value.data_mut()[i] = orig - h;
        let fm = loss(model);
        get(model).value.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic, (fp - fm) / (2.0 * h)));
    }
    worst
}
