//! Central finite-difference gradient checking.

use ndarray::Array2;

/// Worst relative error between `analytic` and the central difference of `f`
/// around `x`, perturbing every entry by `h`. Errors are measured as
/// `|a - n| / max(|a|, |n|, floor)` so that near-zero gradients compare absolutely.
pub fn max_relative_error<F>(x: &Array2<f64>, analytic: &Array2<f64>, h: f64, mut f: F) -> f64
where
    F: FnMut(&Array2<f64>) -> f64,
{
    assert_eq!(x.dim(), analytic.dim());
    let numeric = numeric_gradient(x, h, &mut f);
    relative_error(analytic, &numeric)
}

pub fn numeric_gradient<F>(x: &Array2<f64>, h: f64, f: &mut F) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    out
}

pub fn relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
