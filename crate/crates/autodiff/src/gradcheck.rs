//! Central finite differences, for checking analytic gradients.

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for the `index`-th coordinate of `point`.
pub fn central_difference<F>(mut f: F, point: &mut [f64], index: usize, step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = point[index];
    point[index] = orig + step;
    let plus = f(point);
    point[index] = orig - step;
    let minus = f(point);
    point[index] = orig;
    (plus - minus) / (2.0 * step)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps the ratio meaningful when both derivatives are ~0.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
