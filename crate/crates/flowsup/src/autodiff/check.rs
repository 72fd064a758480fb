//! Numeric gradient utilities for verifying backward passes.
//!
//! Central differences are the independent oracle used throughout the test
//! suite; they never touch the tape.

/// Central-difference gradient of a scalar function at `point`.
pub fn numeric_grad<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut p = point.to_vec();
    for i in 0..point.len() {
        p[i] = point[i] + h;
        let fp = f(&p);
        p[i] = point[i] - h;
        let fm = f(&p);
        p[i] = point[i];
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Largest mismatch between two gradient vectors, relative to the largest
/// component magnitude (floored to avoid division blow-up near zero).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |v: &[f64]| v[0] * v[0] + 2.0 * v[0] * v[1];
        let g = numeric_grad(f, &[1.0, 2.0], 1e-6);
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn rel_error_scale() {
        let e = max_rel_error(&[1.0, 2.0], &[1.0, 2.002]);
        assert!((e - 0.002 / 2.002).abs() < 1e-12);
    }
}
