//! Central finite differences, the reference every backward rule is checked against.

/// Step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for coordinate `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] = x[i] + h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`: relative error with an absolute floor so
/// gradients that vanish analytically are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
