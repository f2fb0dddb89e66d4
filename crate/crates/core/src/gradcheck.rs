//! Central finite differences for checking analytic gradients.

/// Gradient magnitudes below this are compared in absolute rather than
/// relative terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `point`.
pub fn central_differences(point: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest [`relative_error`] over paired entries. Panics on length mismatch.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
