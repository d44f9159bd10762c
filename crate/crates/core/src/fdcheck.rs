//! Finite-difference utilities shared by gradient tests.

/// Relative error with a unit floor: `|a - b| / max(1, |a|, |b|)`.
///
/// The floor keeps the measure meaningful when both values are tiny,
/// where a raw relative error would amplify noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Central difference of `f` along coordinate `i` of `xs` with step `h`.
///
/// `f` receives a perturbed copy; `xs` itself is never mutated.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(xs: &[f64], i: usize, h: f64, mut f: F) -> f64 {
    let mut plus = xs.to_vec();
    plus[i] += h;
    let mut minus = xs.to_vec();
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Compares an analytic gradient against central differences coordinate
/// by coordinate. Returns the first violating coordinate as
/// `(index, analytic, fd, rel_err)`, or `None` when all pass.
///
/// `stride` subsamples coordinates (1 checks every one); `h` is the
/// probe step and `tol` the relative-error bound.
pub fn first_grad_mismatch<F: FnMut(&[f64]) -> f64>(
    xs: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
    stride: usize,
    mut f: F,
) -> Option<(usize, f64, f64, f64)> {
    assert_eq!(xs.len(), analytic.len(), "gradient length must match input length");
    let stride = stride.max(1);
    let mut i = 0;
    while i < xs.len() {
        let fd = central_diff(xs, i, h, &mut f);
        let err = rel_err(analytic[i], fd);
        if err > tol {
            return Some((i, analytic[i], fd, err));
        }
        i += stride;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_recovers_polynomial_derivative() {
        // f(x) = x0^2 * x1 + 3 x1  =>  df/dx0 = 2 x0 x1, df/dx1 = x0^2 + 3
        let xs = [1.5, -2.0];
        let f = |v: &[f64]| v[0] * v[0] * v[1] + 3.0 * v[1];
        let d0 = central_diff(&xs, 0, 1e-5, f);
        let d1 = central_diff(&xs, 1, 1e-5, f);
        assert!(rel_err(d0, 2.0 * 1.5 * -2.0) < 1e-9);
        assert!(rel_err(d1, 1.5 * 1.5 + 3.0) < 1e-9);
    }

    #[test]
    fn mismatch_scan_finds_the_bad_coordinate() {
        let xs = [0.3, 0.7, -0.2];
        let f = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let mut grad: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        assert!(first_grad_mismatch(&xs, &grad, 1e-5, 1e-8, 1, f).is_none());
        grad[1] += 0.5;
        let hit = first_grad_mismatch(&xs, &grad, 1e-5, 1e-8, 1, f).unwrap();
        assert_eq!(hit.0, 1);
    }

    #[test]
    fn rel_err_floors_at_unit_scale() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-9).abs() < 1e-24);
        assert!((rel_err(200.0, 100.0) - 0.5).abs() < 1e-12);
    }
}
