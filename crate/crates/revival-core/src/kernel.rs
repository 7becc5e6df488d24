//! Covariance functions on revival time, including generalized covariances
//! that are positive definite only on contrasts orthogonal to a drift basis.
//!
//! Stationary choices (`exponential`, `white_noise`) are proper covariance
//! functions. The spline kernels (`linear_spline_generalized`, `cubic_spline`)
//! are generalized covariances: Gram matrices are conditionally positive
//! definite relative to the attached drift basis, which the mean design must
//! absorb. `log_warp` re-expresses any base kernel on the warped coordinate
//! log(s + offset), turning a stationary kernel into a non-stationary one
//! whose behaviour near the terminus is stretched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Default warp offset of about one day, in years.
pub const DEFAULT_WARP_OFFSET: f64 = 1.0 / crate::record::DAYS_PER_YEAR;

/// A covariance function on revival time with an attached drift basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Kernel {
    /// delta(s, s'): uncorrelated measurement noise.
    WhiteNoise,
    /// Constant 1: a random intercept when used per patient.
    Constant,
    /// exp(-|s - s'| / range).
    Exponential { range: f64 },
    /// s^nu + s'^nu - |s - s'|^nu with 0 < nu < 2; nu = 1 is Brownian motion.
    FractionalBrownian { exponent: f64 },
    /// -|s - s'| relative to constants; increments match Brownian motion.
    LinearSplineGeneralized,
    /// |s - s'|^3 relative to span{1, s}.
    CubicSpline,
    /// Base kernel evaluated at log(s + offset).
    LogWarp { offset: f64, base: Box<Kernel> },
}

/// One drift-basis function s -> real attached to a generalized kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DriftFn {
    /// Constant 1.
    Const,
    /// The coordinate itself, s.
    Coordinate,
    /// log(s + offset).
    LogOffset(f64),
}

impl DriftFn {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            DriftFn::Const => 1.0,
            DriftFn::Coordinate => s,
            DriftFn::LogOffset(delta) => (s + delta).ln(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            DriftFn::Const => "drift:1".into(),
            DriftFn::Coordinate => "drift:s".into(),
            DriftFn::LogOffset(d) => format!("drift:log(s+{d})"),
        }
    }
}

/// Uncorrelated unit noise.
pub fn white_noise() -> Kernel {
    Kernel::WhiteNoise
}

/// Constant unit covariance (random intercept when used per patient).
pub fn constant() -> Kernel {
    Kernel::Constant
}

/// Exponential correlation with the given range (years), range > 0.
pub fn exponential(range: f64) -> Result<Kernel> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::KernelParam(format!("exponential range must be > 0, got {range}")));
    }
    Ok(Kernel::Exponential { range })
}

/// Fractional Brownian covariance with exponent in (0, 2).
pub fn fractional_brownian(exponent: f64) -> Result<Kernel> {
    if !(exponent > 0.0 && exponent < 2.0) {
        return Err(Error::KernelParam(format!(
            "fractional Brownian exponent must lie in (0, 2), got {exponent}"
        )));
    }
    Ok(Kernel::FractionalBrownian { exponent })
}

/// Generalized covariance -|s - s'| with drift basis {1}.
pub fn linear_spline_generalized() -> Kernel {
    Kernel::LinearSplineGeneralized
}

/// Generalized covariance |s - s'|^3 with drift basis {1, s}.
pub fn cubic_spline() -> Kernel {
    Kernel::CubicSpline
}

/// Base kernel on the warped coordinate log(s + offset), offset > 0.
///
/// The drift basis is composed with the warp, so a linear spline keeps {1}
/// and a cubic spline maps {1, s} to {1, log(s + offset)}. Nested warps are
/// rejected.
pub fn log_warp(base: Kernel, offset: f64) -> Result<Kernel> {
    if !(offset > 0.0) || !offset.is_finite() {
        return Err(Error::KernelParam(format!("log-warp offset must be > 0, got {offset}")));
    }
    if matches!(base, Kernel::LogWarp { .. }) {
        return Err(Error::KernelParam("nested log warps are not supported".into()));
    }
    Ok(Kernel::LogWarp { offset, base: Box::new(base) })
}

impl Kernel {
    /// Covariance between revival times s and s'. The warped kernels require
    /// s >= 0 (revival times are always positive in practice).
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match self {
            Kernel::WhiteNoise => {
                if s == t {
                    1.0
                } else {
                    0.0
                }
            }
            Kernel::Constant => 1.0,
            Kernel::Exponential { range } => (-(s - t).abs() / range).exp(),
            Kernel::FractionalBrownian { exponent } => {
                s.abs().powf(*exponent) + t.abs().powf(*exponent) - (s - t).abs().powf(*exponent)
            }
            Kernel::LinearSplineGeneralized => -(s - t).abs(),
            Kernel::CubicSpline => (s - t).abs().powi(3),
            Kernel::LogWarp { offset, base } => {
                base.eval((s + offset).ln(), (t + offset).ln())
            }
        }
    }

    /// A proper covariance representative: agrees with `eval` on every
    /// contrast orthogonal to the drift basis, but is positive semidefinite
    /// outright so assembled covariances admit a Cholesky factor.
    ///
    /// The generalized kernel -|s - s'| maps to Brownian motion
    /// s + s' - |s - s'|; |s - s'|^3 maps to an integrated-Brownian form
    /// 2 min^2 (3 max - min); warped kernels use the shifted warped
    /// coordinate log((s + offset) / offset) >= 0. Restricted likelihoods,
    /// projected residuals and kriging predictors are unchanged by the
    /// substitution because the differences lie in the drift span absorbed by
    /// the extended design.
    pub fn eval_proper(&self, s: f64, t: f64) -> f64 {
        match self {
            Kernel::LinearSplineGeneralized => s + t - (s - t).abs(),
            Kernel::CubicSpline => {
                let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
                2.0 * lo * lo * (3.0 * hi - lo)
            }
            Kernel::LogWarp { offset, base } => {
                let u = ((s + offset) / offset).ln();
                let v = ((t + offset) / offset).ln();
                base.eval_proper(u, v)
            }
            _ => self.eval(s, t),
        }
    }

    /// Drift basis relative to which Gram matrices are conditionally positive
    /// definite; empty for proper covariance functions.
    pub fn drift_basis(&self) -> Vec<DriftFn> {
        match self {
            Kernel::WhiteNoise
            | Kernel::Constant
            | Kernel::Exponential { .. }
            | Kernel::FractionalBrownian { .. } => Vec::new(),
            Kernel::LinearSplineGeneralized => vec![DriftFn::Const],
            Kernel::CubicSpline => vec![DriftFn::Const, DriftFn::Coordinate],
            Kernel::LogWarp { offset, base } => base
                .drift_basis()
                .into_iter()
                .map(|f| match f {
                    DriftFn::Const => DriftFn::Const,
                    DriftFn::Coordinate => DriftFn::LogOffset(*offset),
                    DriftFn::LogOffset(_) => DriftFn::LogOffset(*offset),
                })
                .collect(),
        }
    }

    pub fn is_stationary(&self) -> bool {
        match self {
            Kernel::WhiteNoise
            | Kernel::Exponential { .. }
            | Kernel::Constant
            | Kernel::LinearSplineGeneralized
            | Kernel::CubicSpline => true,
            Kernel::FractionalBrownian { .. } | Kernel::LogWarp { .. } => false,
        }
    }

    /// Range parameter, for kernels that have one.
    pub fn range(&self) -> Option<f64> {
        match self {
            Kernel::Exponential { range } => Some(*range),
            Kernel::LogWarp { base, .. } => base.range(),
            _ => None,
        }
    }

    /// Same kernel with the range replaced, for range estimation.
    pub fn with_range(&self, range: f64) -> Result<Kernel> {
        match self {
            Kernel::Exponential { .. } => exponential(range),
            Kernel::LogWarp { offset, base } => log_warp(base.with_range(range)?, *offset),
            _ => Err(Error::KernelParam("kernel has no range parameter".into())),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Kernel::WhiteNoise => "white_noise".into(),
            Kernel::Constant => "constant".into(),
            Kernel::Exponential { range } => format!("exponential(range={range})"),
            Kernel::FractionalBrownian { exponent } => {
                format!("fractional_brownian(exponent={exponent})")
            }
            Kernel::LinearSplineGeneralized => "linear_spline".into(),
            Kernel::CubicSpline => "cubic_spline".into(),
            Kernel::LogWarp { offset, base } => format!("log_warp({}, offset={offset})", base.name()),
        }
    }
}

/// Gram matrix of a kernel over the given points.
///
/// With `patient_blocks`, entries for cross-patient pairs are zeroed (the
/// Kronecker delta over patients); blocks must partition `0..points.len()`
/// into contiguous ranges. Without blocks the matrix is dense.
pub fn gram(
    kernel: &Kernel,
    points: &[f64],
    patient_blocks: Option<&[std::ops::Range<usize>]>,
) -> DMatrix<f64> {
    let n = points.len();
    let mut out = DMatrix::zeros(n, n);
    match patient_blocks {
        None => {
            for i in 0..n {
                for j in 0..=i {
                    let v = kernel.eval(points[i], points[j]);
                    out[(i, j)] = v;
                    out[(j, i)] = v;
                }
            }
        }
        Some(blocks) => {
            for b in blocks {
                for i in b.clone() {
                    for j in b.start..=i {
                        let v = kernel.eval(points[i], points[j]);
                        out[(i, j)] = v;
                        out[(j, i)] = v;
                    }
                }
            }
        }
    }
    out
}

/// Cross-covariance matrix between two point sets (rows index `a`).
pub fn gram_cross(kernel: &Kernel, a: &[f64], b: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.len(), b.len());
    for (i, s) in a.iter().enumerate() {
        for (j, t) in b.iter().enumerate() {
            out[(i, j)] = kernel.eval(*s, *t);
        }
    }
    out
}

/// Gram matrix of the proper representative (see [`Kernel::eval_proper`]).
pub fn gram_proper(
    kernel: &Kernel,
    points: &[f64],
    patient_blocks: Option<&[std::ops::Range<usize>]>,
) -> DMatrix<f64> {
    let n = points.len();
    let mut out = DMatrix::zeros(n, n);
    let mut fill = |range: std::ops::Range<usize>| {
        for i in range.clone() {
            for j in range.start..=i {
                let v = kernel.eval_proper(points[i], points[j]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
    };
    match patient_blocks {
        None => fill(0..n),
        Some(blocks) => blocks.iter().for_each(|b| fill(b.clone())),
    }
    out
}

/// Cross matrix of the proper representative.
pub fn gram_cross_proper(kernel: &Kernel, a: &[f64], b: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.len(), b.len());
    for (i, s) in a.iter().enumerate() {
        for (j, t) in b.iter().enumerate() {
            out[(i, j)] = kernel.eval_proper(*s, *t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_noise_matches_kronecker_delta() {
        let k = white_noise();
        assert_eq!(k.eval(1.0, 1.0), 1.0);
        assert_eq!(k.eval(1.0, 2.0), 0.0);
        let g = gram(&k, &[0.5, 1.5, 7.0], None);
        assert_eq!(g, DMatrix::identity(3, 3));
    }

    #[test]
    fn exponential_autocorrelation_at_one_year_lag() {
        // Range 1.5 years gives autocorrelation exp(-2/3) ~ 0.51 at lag one.
        let k = exponential(1.5).unwrap();
        assert_relative_eq!(k.eval(2.0, 1.0), (-2.0f64 / 3.0).exp(), epsilon = 1e-15);
        assert!((k.eval(2.0, 1.0) - 0.51).abs() < 0.01);
        assert_eq!(k.eval(3.25, 3.25), 1.0);
        let wide = exponential(5.0).unwrap();
        assert_relative_eq!(wide.eval(5.0, 10.0), (-1.0f64).exp(), epsilon = 1e-15);
        assert!(exponential(0.0).is_err());
        assert!(exponential(-1.0).is_err());
    }

    #[test]
    fn fractional_brownian_with_unit_exponent_is_brownian() {
        let k = fractional_brownian(1.0).unwrap();
        for (s, t) in [(0.3, 1.7), (2.0, 2.0), (5.0, 0.1)] {
            assert_relative_eq!(k.eval(s, t), 2.0 * s.min(t), epsilon = 1e-12);
        }
        assert_eq!(k.eval(0.0, 4.2), 0.0);
        assert_eq!(k.eval(3.0, 3.0), 6.0);
        assert!(fractional_brownian(0.0).is_err());
        assert!(fractional_brownian(2.0).is_err());
    }

    #[test]
    fn linear_spline_contrast_variances_are_nonnegative() {
        let k = linear_spline_generalized();
        assert_eq!(k.eval(2.0, 2.0), 0.0);
        // c = (1, -1) on (0, h): increment variance 2h.
        let h = 0.7;
        let g = gram(&k, &[0.0, h], None);
        let c = nalgebra::DVector::from_vec(vec![1.0, -1.0]);
        assert_relative_eq!((c.transpose() * &g * &c)[(0, 0)], 2.0 * h, epsilon = 1e-12);
        // Second difference on (0, 1, 2): direct Gram arithmetic gives 4.
        let g = gram(&k, &[0.0, 1.0, 2.0], None);
        let c = nalgebra::DVector::from_vec(vec![1.0, -2.0, 1.0]);
        assert_relative_eq!((c.transpose() * &g * &c)[(0, 0)], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn cubic_spline_point_values() {
        let k = cubic_spline();
        assert_eq!(k.eval(1.0, 1.0), 0.0);
        assert_eq!(k.eval(0.0, 2.0), 8.0);
        assert_eq!(k.drift_basis(), vec![DriftFn::Const, DriftFn::Coordinate]);
    }

    #[test]
    fn log_warp_composes_kernel_and_drift() {
        let delta = DEFAULT_WARP_OFFSET;
        let k = log_warp(linear_spline_generalized(), delta).unwrap();
        let (s, t) = (0.4, 2.6);
        let expect = -((s + delta).ln() - (t + delta).ln()).abs();
        assert_relative_eq!(k.eval(s, t), expect, epsilon = 1e-15);
        assert_eq!(k.eval(1.0, 1.0), 0.0);
        assert_eq!(k.drift_basis(), vec![DriftFn::Const]);

        let warped_cubic = log_warp(cubic_spline(), 1.0).unwrap();
        assert_relative_eq!(warped_cubic.eval(0.0, 1.0), 2.0f64.ln().powi(3), epsilon = 1e-15);
        assert_eq!(
            warped_cubic.drift_basis(),
            vec![DriftFn::Const, DriftFn::LogOffset(1.0)]
        );

        assert!(log_warp(cubic_spline(), 0.0).is_err());
        assert!(log_warp(k.clone(), 1.0).is_err());
    }

    #[test]
    fn gram_zeroes_cross_patient_entries() {
        let k = exponential(2.0).unwrap();
        let points = [1.0, 2.0, 3.0];
        let blocks = [0..2, 2..3];
        let g = gram(&k, &points, Some(&blocks));
        assert_eq!(g[(0, 2)], 0.0);
        assert_eq!(g[(2, 0)], 0.0);
        assert!(g[(0, 1)] > 0.0);
        assert_eq!(g[(2, 2)], 1.0);
        assert_eq!(g.transpose(), g);
    }

    fn random_contrast_check(kernel: &Kernel, rng: &mut ChaCha8Rng, n_contrasts: usize) {
        let points: Vec<f64> = (0..12).map(|_| rng.gen_range(0.01..10.0)).collect();
        let g = gram(kernel, &points, None);
        let basis = kernel.drift_basis();
        let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        // Orthonormalize the drift columns so projecting a contrast out of
        // their joint span is a single pass.
        let mut ortho: Vec<Vec<f64>> = Vec::new();
        for f in &basis {
            let mut fv: Vec<f64> = points.iter().map(|s| f.eval(*s)).collect();
            for q in &ortho {
                let dot: f64 = fv.iter().zip(q).map(|(a, b)| a * b).sum();
                for (v, qi) in fv.iter_mut().zip(q) {
                    *v -= dot * qi;
                }
            }
            let norm = fv.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in fv.iter_mut() {
                *v /= norm;
            }
            ortho.push(fv);
        }
        for _ in 0..n_contrasts {
            let mut c: Vec<f64> = (0..points.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for q in &ortho {
                let dot: f64 = c.iter().zip(q).map(|(a, b)| a * b).sum();
                for (ci, qi) in c.iter_mut().zip(q) {
                    *ci -= dot * qi;
                }
            }
            let cv = nalgebra::DVector::from_vec(c);
            let q = (cv.transpose() * &g * &cv)[(0, 0)];
            let norm2 = cv.norm_squared();
            assert!(
                q >= -1e-9 * norm2 * scale,
                "contrast variance {q} negative beyond tolerance for {}",
                kernel.name()
            );
        }
    }

    #[test]
    fn conditional_positive_definiteness_on_random_contrasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kernel in [
            white_noise(),
            constant(),
            exponential(1.5).unwrap(),
            fractional_brownian(0.5).unwrap(),
            fractional_brownian(1.5).unwrap(),
            linear_spline_generalized(),
            cubic_spline(),
            log_warp(linear_spline_generalized(), DEFAULT_WARP_OFFSET).unwrap(),
            log_warp(cubic_spline(), DEFAULT_WARP_OFFSET).unwrap(),
        ] {
            random_contrast_check(&kernel, &mut rng, 1000);
        }
    }

    #[test]
    fn stationary_kernels_are_translation_invariant() {
        let points = [0.5, 1.25, 4.0, 9.0];
        let shifted: Vec<f64> = points.iter().map(|s| s + 3.3).collect();
        for kernel in [white_noise(), exponential(2.5).unwrap(), linear_spline_generalized(), cubic_spline()] {
            let a = gram(&kernel, &points, None);
            let b = gram(&kernel, &shifted, None);
            assert!((a - b).abs().max() < 1e-12, "{} not stationary", kernel.name());
        }
    }

    #[test]
    fn proper_representative_agrees_on_drift_orthogonal_contrasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for kernel in [
            linear_spline_generalized(),
            cubic_spline(),
            log_warp(linear_spline_generalized(), DEFAULT_WARP_OFFSET).unwrap(),
            log_warp(cubic_spline(), DEFAULT_WARP_OFFSET).unwrap(),
            exponential(2.0).unwrap(),
        ] {
            let points: Vec<f64> = (0..9).map(|_| rng.gen_range(0.05..8.0)).collect();
            let raw = gram(&kernel, &points, None);
            let proper = gram_proper(&kernel, &points, None);
            let basis = kernel.drift_basis();
            let mut ortho: Vec<Vec<f64>> = Vec::new();
            for f in &basis {
                let mut fv: Vec<f64> = points.iter().map(|s| f.eval(*s)).collect();
                for q in &ortho {
                    let dot: f64 = fv.iter().zip(q).map(|(a, b)| a * b).sum();
                    fv.iter_mut().zip(q).for_each(|(v, qi)| *v -= dot * qi);
                }
                let norm = fv.iter().map(|v| v * v).sum::<f64>().sqrt();
                fv.iter_mut().for_each(|v| *v /= norm);
                ortho.push(fv);
            }
            for _ in 0..200 {
                let mut c: Vec<f64> =
                    (0..points.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for q in &ortho {
                    let dot: f64 = c.iter().zip(q).map(|(a, b)| a * b).sum();
                    c.iter_mut().zip(q).for_each(|(ci, qi)| *ci -= dot * qi);
                }
                let cv = nalgebra::DVector::from_vec(c);
                let q_raw = (cv.transpose() * &raw * &cv)[(0, 0)];
                let q_proper = (cv.transpose() * &proper * &cv)[(0, 0)];
                assert_relative_eq!(q_raw, q_proper, epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn kernel_specs_roundtrip_through_serde() {
        let k = log_warp(cubic_spline(), DEFAULT_WARP_OFFSET).unwrap();
        let text = serde_json::to_string(&k).unwrap();
        let back: Kernel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, k);
    }
}
