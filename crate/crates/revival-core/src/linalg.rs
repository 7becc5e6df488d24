//! Cholesky-based helpers shared by the fitting and prediction code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added to assembled covariances before factorization.
/// Generalized kernels yield semidefinite contrast covariances, so a small
/// ridge proportional to the mean diagonal keeps the factorization alive.
pub const RELATIVE_JITTER: f64 = 1e-8;

/// The jitter applied to a covariance before factorization: relative to the
/// mean diagonal scale.
pub fn jitter_magnitude(sigma: &DMatrix<f64>) -> f64 {
    let n = sigma.nrows().max(1);
    let mean_diag = sigma.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    RELATIVE_JITTER * mean_diag.max(f64::MIN_POSITIVE)
}

/// Adds jitter scaled by the mean diagonal, then factors. Fails with
/// [`Error::Factorization`] if the matrix is still not positive definite.
pub fn cholesky_with_jitter(mut sigma: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = sigma.nrows();
    if n == 0 {
        return Err(Error::Factorization);
    }
    let jitter = jitter_magnitude(&sigma);
    for i in 0..n {
        sigma[(i, i)] += jitter;
    }
    sigma.cholesky().ok_or(Error::Factorization)
}

/// log det of the factored matrix.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Log density of a multivariate Gaussian N(mean, sigma) at y, factoring
/// sigma with jitter.
pub fn gaussian_log_density(y: &DVector<f64>, mean: &DVector<f64>, sigma: DMatrix<f64>) -> Result<f64> {
    let n = y.len() as f64;
    let chol = cholesky_with_jitter(sigma)?;
    let resid = y - mean;
    let half_quad = 0.5 * (chol.solve(&resid).dot(&resid));
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det(&chol) - half_quad)
}

/// Numerical column rank via column-pivoted QR.
pub fn rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 || x.nrows() == 0 {
        return 0;
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let tol = 1e-10 * r[(0, 0)].abs().max(1.0);
    (0..r.nrows().min(r.ncols())).take_while(|&i| r[(i, i)].abs() > tol).count()
}

/// Sample variance with the n-1 denominator.
pub fn sample_variance(y: &DVector<f64>) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mean = y.mean();
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn jittered_cholesky_handles_semidefinite_matrices() {
        // Rank-one plus zero diagonal: semidefinite, needs the jitter.
        let ones = DMatrix::from_element(4, 4, 1.0);
        let chol = cholesky_with_jitter(ones).unwrap();
        assert!(log_det(&chol).is_finite());
    }

    #[test]
    fn gaussian_log_density_matches_univariate_formula() {
        let y = DVector::from_vec(vec![1.3]);
        let mean = DVector::from_vec(vec![0.8]);
        let sigma = DMatrix::from_element(1, 1, 2.0);
        let got = gaussian_log_density(&y, &mean, sigma).unwrap();
        let manual = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 0.5 * 0.25 / 2.0;
        assert_relative_eq!(got, manual, epsilon = 1e-7);
    }

    #[test]
    fn rank_detects_dependent_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(rank(&x), 1);
    }

    #[test]
    fn sample_variance_uses_n_minus_one() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_relative_eq!(sample_variance(&y), 1.0, epsilon = 1e-14);
    }
}
