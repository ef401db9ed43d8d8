//! Finite-difference helpers for checking analytic gradients.

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Magnitude below which gradient comparisons switch from relative to
/// absolute error. Central differences at `h = 1e-5` carry round-off of
/// roughly `1e-11`, which would swamp the relative error of gradients that
/// are themselves near zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}
