//! Derivative-free minimization used by the likelihood fits.

use crate::error::{Error, Result};

pub struct NelderMeadOptions {
    /// Convergence tolerance on the objective spread across the simplex.
    pub f_tol: f64,
    /// Maximum iterations per start.
    pub max_iters: usize,
    /// Initial simplex edge length.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { f_tol: 1e-6, max_iters: 2000, initial_step: 0.5 }
    }
}

pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization with the standard reflection, expansion,
/// contraction and shrink coefficients. Non-finite objective values are
/// treated as +inf so the simplex backs away from invalid regions.
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> Result<MinimizeResult>
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::NonConvergence("empty parameter vector".into()));
    }
    let eval = |x: &[f64]| -> f64 {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += opts.initial_step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();

    let mut iterations = 0;
    let mut converged = false;
    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        if values[n] - values[0] < opts.f_tol && values[0].is_finite() {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for v in simplex.iter().take(n) {
            for (c, vi) in centroid.iter_mut().zip(v) {
                *c += vi / n as f64;
            }
        }
        let point = |coef: f64, from: &[f64]| -> Vec<f64> {
            centroid.iter().zip(from).map(|(c, w)| c + coef * (c - w)).collect()
        };

        let reflected = point(alpha, &simplex[n]);
        let f_r = eval(&reflected);
        if f_r < values[0] {
            let expanded: Vec<f64> =
                centroid.iter().zip(&reflected).map(|(c, r)| c + gamma * (r - c)).collect();
            let f_e = eval(&expanded);
            if f_e < f_r {
                simplex[n] = expanded;
                values[n] = f_e;
            } else {
                simplex[n] = reflected;
                values[n] = f_r;
            }
        } else if f_r < values[n - 1] {
            simplex[n] = reflected;
            values[n] = f_r;
        } else {
            let (candidate, f_c) = if f_r < values[n] {
                let outside: Vec<f64> =
                    centroid.iter().zip(&reflected).map(|(c, r)| c + rho * (r - c)).collect();
                let fc = eval(&outside);
                (outside, fc)
            } else {
                let inside: Vec<f64> =
                    centroid.iter().zip(&simplex[n]).map(|(c, w)| c - rho * (c - w)).collect();
                let fc = eval(&inside);
                (inside, fc)
            };
            if f_c < values[n].min(f_r) {
                simplex[n] = candidate;
                values[n] = f_c;
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].clone();
                for i in 1..=n {
                    for (v, b) in simplex[i].iter_mut().zip(&best) {
                        *v = b + sigma * (*v - b);
                    }
                    values[i] = eval(&simplex[i]);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    Ok(MinimizeResult { x: simplex[best].clone(), value: values[best], iterations, converged })
}

/// Golden-section minimization of a univariate function on [a, b].
pub fn golden_section<F>(f: F, a: f64, b: f64, tol: f64, max_iters: usize) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a, b);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iters {
        if (b - a).abs() < tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    Ok((x, f(x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn minimizes_shifted_quadratic() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2) + 5.0;
        let r = nelder_mead(f, &[0.0, 0.0], &NelderMeadOptions::default()).unwrap();
        assert!(r.converged);
        assert_relative_eq!(r.x[0], 3.0, epsilon = 1e-3);
        assert_relative_eq!(r.x[1], -1.0, epsilon = 1e-3);
        assert_relative_eq!(r.value, 5.0, epsilon = 1e-6);
    }

    #[test]
    fn backs_away_from_non_finite_regions() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let r = nelder_mead(f, &[2.0], &NelderMeadOptions::default()).unwrap();
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, v) = golden_section(|x| (x - 0.7).powi(2), -4.0, 4.0, 1e-10, 200).unwrap();
        assert_relative_eq!(x, 0.7, epsilon = 1e-8);
        assert!(v < 1e-15);
    }
}
