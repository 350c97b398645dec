//! Central finite-difference gradient checking.
//!
//! The checker is an oracle independent of the tape: it only re-evaluates a
//! scalar-valued closure under coordinate perturbations, so it validates the
//! analytic backward pass without sharing any code path with it.

use ndarray::Array2;

/// Central-difference gradient of `f` with respect to `x`, one coordinate at
/// a time. `f` must be a pure function of `x`.
pub fn central_difference<F>(mut f: F, x: &Array2<f64>, eps: f64) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + eps;
        let up = f(&probe);
        probe[[i, j]] = orig - eps;
        let down = f(&probe);
        probe[[i, j]] = orig;
        grad[[i, j]] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest violation of `|a - n| <= atol + rtol * |n|` across entries, or
/// `None` when every entry agrees.
pub fn worst_mismatch(
    analytic: &Array2<f64>,
    numeric: &Array2<f64>,
    rtol: f64,
    atol: f64,
) -> Option<(usize, usize, f64, f64)> {
    assert_eq!(analytic.dim(), numeric.dim());
    let mut worst: Option<(usize, usize, f64, f64)> = None;
    for ((i, j), &a) in analytic.indexed_iter() {
        let n = numeric[[i, j]];
        let excess = (a - n).abs() - (atol + rtol * n.abs());
        if excess > 0.0 {
            match worst {
                Some((_, _, _, w)) if w >= excess => {}
                _ => worst = Some((i, j, a, excess)),
            }
        }
    }
    worst
}

/// Panic with context unless the analytic gradient matches the central
/// difference within `rtol`/`atol`.
pub fn assert_grad_close(
    name: &str,
    analytic: &Array2<f64>,
    numeric: &Array2<f64>,
    rtol: f64,
    atol: f64,
) {
    if let Some((i, j, a, excess)) = worst_mismatch(analytic, numeric, rtol, atol) {
        panic!(
            "gradient check failed for {name} at [{i},{j}]: analytic {a:.9e}, \
             numeric {:.9e}, tolerance exceeded by {excess:.3e}",
            numeric[[i, j]]
        );
    }
}
