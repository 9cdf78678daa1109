//! Central finite differences, the independent oracle for gradient checks.

use crate::error::{AutodiffError, Result};

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// Truncation error is `O(h²)`; each coordinate costs two evaluations.
pub fn fd_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "fd_grad",
            reason: format!("step must be positive, got {h}"),
        });
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// reporting huge relative errors.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`rel_error`] over paired entries.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_error(x, y, floor)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = fd_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn booth_minimum_is_stationary() {
        let booth = |p: &[f64]| {
            let (x, y) = (p[0], p[1]);
            (x + 2.0 * y - 7.0).powi(2) + (2.0 * x + y - 5.0).powi(2)
        };
        let g = fd_grad(booth, &[1.0, 3.0], 1e-5).unwrap();
        assert!(g[0].abs() < 1e-8 && g[1].abs() < 1e-8);
    }

    #[test]
    fn mccormick_at_origin() {
        // ∂/∂x = cos(x+y) + 2(x-y) - 1.5, ∂/∂y = cos(x+y) - 2(x-y) + 2.5
        let mc = |p: &[f64]| {
            let (x, y) = (p[0], p[1]);
            (x + y).sin() + (x - y).powi(2) - 1.5 * x + 2.5 * y + 1.0
        };
        let g = fd_grad(mc, &[0.0, 0.0], 1e-5).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-9);
        assert!((g[1] - 3.5).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_step_rejected() {
        assert!(fd_grad(|x| x[0], &[1.0], 0.0).is_err());
    }
}
