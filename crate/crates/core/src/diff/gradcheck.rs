//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it stays
//! independent of every backward rule it validates.

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, step: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + step;
    let up = f(&probe);
    probe[i] = x[i] - step;
    let down = f(&probe);
    (up - down) / (2.0 * step)
}

/// Full numeric gradient of `f` at `x`.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    (0..x.len()).map(|i| central_diff(f, x, i, step)).collect()
}

/// Largest elementwise relative error between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = numeric_gradient(&mut f, &[2.0, -1.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 0.0, 1e-6), 0.0);
        assert!((rel_err(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-12);
    }
}
