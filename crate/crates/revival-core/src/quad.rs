//! Quadrature helpers: adaptive Simpson integration and trapezoid sums.

use crate::error::{Error, Result};

/// Adaptive Simpson integration of f over [a, b] to the given relative
/// tolerance. Errors if the recursion depth budget is exhausted before the
/// tolerance is met.
pub fn adaptive_simpson<F>(f: &F, a: f64, b: f64, rel_tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(b > a) {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    let scale = whole.abs().max(1e-300);
    let mut exhausted = false;
    let value = recurse(f, a, b, fa, fm, fb, whole, rel_tol * scale, 60, &mut exhausted);
    if exhausted {
        return Err(Error::Quadrature(format!("depth budget exhausted on [{a}, {b}]")));
    }
    Ok(value)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
    exhausted: &mut bool,
) -> f64
where
    F: Fn(f64) -> f64,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    if depth == 0 {
        *exhausted = true;
        return left + right;
    }
    recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1, exhausted)
        + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1, exhausted)
}

/// Trapezoid integral of sampled values over a (possibly uneven) grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Suffix trapezoid sums: out[i] = integral from grid[i] to the end.
pub fn suffix_trapezoid(grid: &[f64], values: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut out = vec![0.0; n];
    for i in (0..n.saturating_sub(1)).rev() {
        out[i] = out[i + 1] + 0.5 * (grid[i + 1] - grid[i]) * (values[i] + values[i + 1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrates_smooth_functions_to_tolerance() {
        let v = adaptive_simpson(&|x: f64| x.exp(), 0.0, 3.0, 1e-10).unwrap();
        assert_relative_eq!(v, 3.0f64.exp() - 1.0, epsilon = 1e-9);
        let v = adaptive_simpson(&|x: f64| 1.0 / (1.0 + x * x), 0.0, 2.0, 1e-10).unwrap();
        assert_relative_eq!(v, 2.0f64.atan(), epsilon = 1e-9);
    }

    #[test]
    fn empty_interval_integrates_to_zero() {
        assert_eq!(adaptive_simpson(&|x: f64| x, 2.0, 2.0, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn trapezoid_sums_match_closed_form_on_linear_data() {
        let grid = [0.0, 1.0, 3.0];
        let values = [0.0, 2.0, 6.0];
        assert_relative_eq!(trapezoid(&grid, &values), 9.0, epsilon = 1e-14);
        let suffix = suffix_trapezoid(&grid, &values);
        assert_relative_eq!(suffix[0], 9.0, epsilon = 1e-14);
        assert_relative_eq!(suffix[1], 8.0, epsilon = 1e-14);
        assert_eq!(suffix[2], 0.0);
    }
}
