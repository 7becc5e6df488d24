//! REML estimation of the Gaussian revival model, the Bayes estimate of the
//! shared trajectory, and likelihood-based checks of the revival assumption.
//!
//! The residual log-likelihood is the Gaussian log-likelihood of contrasts
//! orthogonal to the extended design. It is evaluated in the standard
//! determinant form, which equals the explicit orthonormal-contrast
//! construction exactly (including constants), and is therefore invariant
//! under invertible reparametrization of the design columns. Variance
//! coefficients are optimized on the log scale by a Nelder-Mead simplex with
//! deterministic seeded restarts; degenerate components are pinned at a small
//! floor proportional to the outcome variance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{
    build_design, column_layout, Coordinate, MeanColumn, MeanSpec, RevivalDesign, Sharing,
    VarianceSpec,
};
use crate::error::{Error, Result};
use crate::kernel::{gram_cross_proper, gram_proper, Kernel};
use crate::linalg::{cholesky_with_jitter, log_det, sample_variance};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::record::Dataset;

/// Optimizer settings for the variance-component fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemlOptions {
    /// Convergence tolerance on the objective.
    pub objective_tol: f64,
    /// Iteration cap per simplex start.
    pub max_iters: usize,
    /// Number of simplex starts; starts after the first are perturbed around
    /// the best point found so far.
    pub starts: usize,
    /// Seed for the deterministic start perturbations.
    pub seed: u64,
    /// Standard deviation of the log-scale start perturbations.
    pub perturb_sd: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        RemlOptions { objective_tol: 1e-6, max_iters: 2000, starts: 3, seed: 0, perturb_sd: 0.7 }
    }
}

/// Relative floor below which a variance component counts as degenerate.
pub const COMPONENT_FLOOR_FRACTION: f64 = 1e-10;

/// Assembles the model covariance on the training rows for the given
/// component coefficients and realized ranges.
///
/// Generalized kernels enter through their proper representative (see
/// [`Kernel::eval_proper`]): the restricted likelihood, projected residuals
/// and kriging weights are identical because the extended design spans the
/// drift, while the assembled matrix becomes positive semidefinite and can be
/// factored.
pub fn assemble_covariance(
    design: &RevivalDesign,
    variance: &VarianceSpec,
    sigma2: &[f64],
    ranges: &[Option<f64>],
) -> Result<DMatrix<f64>> {
    if sigma2.len() != variance.components.len() || ranges.len() != variance.components.len() {
        return Err(Error::VarianceSpec("coefficient count does not match components".into()));
    }
    let n = design.n_rows();
    let mut sigma = DMatrix::zeros(n, n);
    for (k, component) in variance.components.iter().enumerate() {
        let kernel = realized_kernel(&component.kernel, ranges[k])?;
        let points = design.coordinate(component.coordinate);
        let blocks = match component.sharing {
            Sharing::Shared => None,
            Sharing::PerPatient => Some(design.blocks.as_slice()),
        };
        let g = gram_proper(&kernel, points, blocks);
        sigma += g * sigma2[k];
    }
    Ok(sigma)
}

fn realized_kernel(kernel: &Kernel, range: Option<f64>) -> Result<Kernel> {
    match range {
        Some(r) if kernel.range() != Some(r) => kernel.with_range(r),
        _ => Ok(kernel.clone()),
    }
}

/// Pieces of one Gaussian likelihood evaluation at fixed covariance.
struct LikelihoodParts {
    restricted: f64,
    profile_ml: f64,
    beta: DVector<f64>,
    beta_cov: DMatrix<f64>,
    sigma_chol: Cholesky<f64, Dyn>,
}

fn likelihood_parts(
    design: &RevivalDesign,
    sigma: DMatrix<f64>,
    logdet_xtx: f64,
) -> Result<LikelihoodParts> {
    let n = design.n_rows() as f64;
    let p = design.x.ncols() as f64;
    let chol = cholesky_with_jitter(sigma)?;
    let l = chol.l_dirty();
    let wx = l
        .solve_lower_triangular(&design.x)
        .ok_or(Error::Factorization)?;
    let wy = l.solve_lower_triangular(&design.y).ok_or(Error::Factorization)?;
    let m = wx.transpose() * &wx;
    let m_chol = m.cholesky().ok_or(Error::Factorization)?;
    let u = wx.transpose() * &wy;
    let beta = m_chol.solve(&u);
    let quad = wy.dot(&wy) - u.dot(&beta);
    let ld_sigma = log_det(&chol);
    let ld_m = log_det(&m_chol);
    let two_pi_ln = (2.0 * std::f64::consts::PI).ln();
    let restricted = -0.5 * ((n - p) * two_pi_ln + ld_sigma + ld_m - logdet_xtx + quad);
    let profile_ml = -0.5 * (n * two_pi_ln + ld_sigma + quad);
    Ok(LikelihoodParts { restricted, profile_ml, beta, beta_cov: m_chol.inverse(), sigma_chol: chol })
}

fn logdet_xtx(design: &RevivalDesign) -> Result<f64> {
    let xtx = design.x.transpose() * &design.x;
    let chol = xtx.cholesky().ok_or(Error::Factorization)?;
    Ok(log_det(&chol))
}

/// Residual log-likelihood of the variance coefficients on a built design,
/// with kernel ranges held at their specification values.
///
/// The value matches the Gaussian log-likelihood of any orthonormal basis of
/// contrasts annihilating the extended design, constants included.
pub fn residual_loglik(
    design: &RevivalDesign,
    variance: &VarianceSpec,
    sigma2: &[f64],
) -> Result<f64> {
    let ranges: Vec<Option<f64>> = variance.components.iter().map(|c| c.kernel.range()).collect();
    let sigma = assemble_covariance(design, variance, sigma2, &ranges)?;
    Ok(likelihood_parts(design, sigma, logdet_xtx(design)?)?.restricted)
}

/// Profile maximum-likelihood value (beta profiled out by GLS) at fixed
/// variance coefficients. Used for likelihood-ratio tests of mean terms,
/// where residual likelihoods with different designs are not comparable.
pub fn profile_ml_loglik(
    design: &RevivalDesign,
    variance: &VarianceSpec,
    sigma2: &[f64],
) -> Result<f64> {
    let ranges: Vec<Option<f64>> = variance.components.iter().map(|c| c.kernel.range()).collect();
    let sigma = assemble_covariance(design, variance, sigma2, &ranges)?;
    Ok(likelihood_parts(design, sigma, 0.0)?.profile_ml)
}

/// A fitted (or externally specified) Gaussian revival model.
///
/// `beta` covers every extended-design column: the mean-model coefficients
/// first, then coefficients of drift columns appended for generalized
/// kernels. Models built from known parameters carry no training data and
/// support marginal prediction only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedRevivalModel {
    pub mean: MeanSpec,
    pub variance: VarianceSpec,
    pub treatment_levels: Vec<String>,
    pub columns: Vec<MeanColumn>,
    pub n_mean_cols: usize,
    pub beta: DVector<f64>,
    /// Covariance of beta at the fitted variance parameters; absent for
    /// externally specified models.
    pub beta_cov: Option<DMatrix<f64>>,
    /// Variance coefficients, one per component of `variance`.
    pub sigma2: Vec<f64>,
    /// Realized range per component (None when the kernel has none).
    pub ranges: Vec<Option<f64>>,
    /// Components driven to the lower floor during estimation.
    pub pinned: Vec<bool>,
    pub max_residual_loglik: Option<f64>,
    pub converged: bool,
    /// Training layout, kept for conditional prediction and the Bayes
    /// trajectory estimate.
    pub training: Option<RevivalDesign>,
}

impl FittedRevivalModel {
    /// Model with known coefficients and variance components, e.g. for
    /// prediction under a specified rather than estimated model.
    pub fn from_parameters(
        mean: MeanSpec,
        variance: VarianceSpec,
        treatment_levels: Vec<String>,
        beta: Vec<f64>,
        sigma2: Vec<f64>,
    ) -> Result<Self> {
        variance.validate()?;
        let (columns, n_mean_cols) = column_layout(&mean, &variance, &treatment_levels);
        if beta.len() != columns.len() {
            return Err(Error::Prediction(format!(
                "expected {} coefficients for columns [{}], got {}",
                columns.len(),
                columns.iter().map(|c| c.name()).collect::<Vec<_>>().join(", "),
                beta.len()
            )));
        }
        if sigma2.len() != variance.components.len() {
            return Err(Error::VarianceSpec("one coefficient per component is required".into()));
        }
        let ranges = variance.components.iter().map(|c| c.kernel.range()).collect();
        Ok(FittedRevivalModel {
            mean,
            variance,
            treatment_levels,
            columns,
            n_mean_cols,
            beta: DVector::from_vec(beta),
            beta_cov: None,
            sigma2,
            ranges,
            pinned: Vec::new(),
            max_residual_loglik: None,
            converged: true,
            training: None,
        })
    }

    /// Standard errors of the mean-model coefficients.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let cov = self.beta_cov.as_ref()?;
        Some((0..self.n_mean_cols).map(|j| cov[(j, j)].max(0.0).sqrt()).collect())
    }

    /// Kernel of component k with its realized range.
    pub fn component_kernel(&self, k: usize) -> Result<Kernel> {
        realized_kernel(&self.variance.components[k].kernel, self.ranges[k])
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name()).collect()
    }

    /// True when any variance component is shared across patients.
    pub fn has_shared_component(&self) -> bool {
        self.variance.components.iter().any(|c| c.sharing == Sharing::Shared)
    }
}

struct Parametrization {
    n_components: usize,
    floor: f64,
    range_slots: Vec<usize>, // component indices with estimated ranges
}

impl Parametrization {
    fn unpack(&self, theta: &[f64], variance: &VarianceSpec) -> (Vec<f64>, Vec<Option<f64>>) {
        let sigma2: Vec<f64> =
            theta[..self.n_components].iter().map(|t| self.floor + t.exp()).collect();
        let mut ranges: Vec<Option<f64>> =
            variance.components.iter().map(|c| c.kernel.range()).collect();
        for (slot, &k) in self.range_slots.iter().enumerate() {
            ranges[k] = Some(theta[self.n_components + slot].exp());
        }
        (sigma2, ranges)
    }
}

fn fit_design_inner(
    design: &RevivalDesign,
    variance: &VarianceSpec,
    opts: &RemlOptions,
    use_ml: bool,
) -> Result<(Vec<f64>, Vec<Option<f64>>, Vec<bool>, f64, bool)> {
    variance.validate()?;
    let n_components = variance.components.len();
    let var_y = sample_variance(&design.y).max(f64::MIN_POSITIVE);
    let floor = COMPONENT_FLOOR_FRACTION * var_y;
    let range_slots: Vec<usize> = variance
        .components
        .iter()
        .enumerate()
        .filter(|(_, c)| c.estimate_range)
        .map(|(k, _)| k)
        .collect();
    let par = Parametrization { n_components, floor, range_slots };

    let ld_xtx = logdet_xtx(design)?;
    let objective = |theta: &[f64]| -> f64 {
        let (sigma2, ranges) = par.unpack(theta, variance);
        let sigma = match assemble_covariance(design, variance, &sigma2, &ranges) {
            Ok(s) => s,
            Err(_) => return f64::INFINITY,
        };
        match likelihood_parts(design, sigma, ld_xtx) {
            Ok(parts) => {
                if use_ml {
                    -parts.profile_ml
                } else {
                    -parts.restricted
                }
            }
            Err(_) => f64::INFINITY,
        }
    };

    // Start from an equal split of the outcome variance across components;
    // estimated ranges start at a quarter of the revival span.
    let start_sigma2 = (var_y / n_components as f64).max(2.0 * floor);
    let mut start: Vec<f64> = vec![(start_sigma2 - floor).ln(); n_components];
    let max_s = design.s.iter().cloned().fold(0.0_f64, f64::max);
    for _ in &par.range_slots {
        start.push((max_s / 4.0).max(1e-3).ln());
    }

    let nm_opts = NelderMeadOptions {
        f_tol: opts.objective_tol,
        max_iters: opts.max_iters,
        initial_step: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<crate::optim::MinimizeResult> = None;
    let mut any_converged = false;
    for run in 0..opts.starts.max(1) {
        let origin = best.as_ref().map(|b| b.x.clone()).unwrap_or_else(|| start.clone());
        let x0: Vec<f64> = if run == 0 {
            origin
        } else {
            origin
                .iter()
                .map(|v| v + opts.perturb_sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        };
        let result = nelder_mead(&objective, &x0, &nm_opts)?;
        any_converged |= result.converged;
        if best.as_ref().is_none_or(|b| result.value < b.value) {
            best = Some(result);
        }
    }
    let best = best.expect("at least one simplex start");
    if !best.value.is_finite() {
        return Err(Error::NonConvergence("objective not finite at the best iterate".into()));
    }
    let (sigma2, ranges) = par.unpack(&best.x, variance);
    let pinned: Vec<bool> =
        best.x[..n_components].iter().map(|t| t.exp() < floor).collect();
    Ok((sigma2, ranges, pinned, -best.value, any_converged))
}

/// REML fit of the variance components and GLS mean coefficients on an
/// already-built design. Deterministic given the design, specification and
/// options.
pub fn fit_reml_design(
    design: RevivalDesign,
    variance: &VarianceSpec,
    opts: &RemlOptions,
) -> Result<FittedRevivalModel> {
    let (sigma2, ranges, pinned, max_ll, converged) =
        fit_design_inner(&design, variance, opts, false)?;
    let sigma = assemble_covariance(&design, variance, &sigma2, &ranges)?;
    let parts = likelihood_parts(&design, sigma, logdet_xtx(&design)?)?;
    let mean = MeanSpec::new(Vec::new()); // replaced by caller when known
    let mut model = FittedRevivalModel {
        mean,
        variance: variance.clone(),
        treatment_levels: design.treatment_levels.clone(),
        columns: design.columns.clone(),
        n_mean_cols: design.n_mean_cols,
        beta: parts.beta,
        beta_cov: Some(parts.beta_cov),
        sigma2,
        ranges,
        pinned,
        max_residual_loglik: Some(max_ll),
        converged,
        training: None,
    };
    model.training = Some(design);
    Ok(model)
}

/// Two-stage REML fit: aligns the complete records, builds the design and
/// estimates variance components and mean coefficients.
pub fn fit_reml(
    dataset: &Dataset,
    mean: &MeanSpec,
    variance: &VarianceSpec,
    opts: &RemlOptions,
) -> Result<FittedRevivalModel> {
    let design = build_design(dataset, mean, variance)?;
    let mut model = fit_reml_design(design, variance, opts)?;
    model.mean = mean.clone();
    Ok(model)
}

/// Empirical Bayes estimate of a shared component's trajectory on a grid of
/// revival times: the conditional expectation of the centered component given
/// the data, a linear function of the observed outcomes.
pub fn bayes_trajectory(
    model: &FittedRevivalModel,
    component_label: &str,
    s_grid: &[f64],
) -> Result<Vec<f64>> {
    let design = model
        .training
        .as_ref()
        .ok_or_else(|| Error::Prediction("bayes trajectory requires training data".into()))?;
    let k = model
        .variance
        .component_index(component_label)
        .ok_or_else(|| Error::VarianceSpec(format!("no component labelled {component_label}")))?;
    let component = &model.variance.components[k];
    if component.sharing != Sharing::Shared {
        return Err(Error::Prediction(format!(
            "component {component_label} is per-patient; the Bayes estimate applies to shared components"
        )));
    }
    let sigma = assemble_covariance(design, &model.variance, &model.sigma2, &model.ranges)?;
    let chol = cholesky_with_jitter(sigma)?;
    let resid = &design.y - &design.x * &model.beta;
    let weights = chol.solve(&resid);
    let kernel = model.component_kernel(k)?;
    let cross = gram_cross_proper(&kernel, s_grid, design.coordinate(component.coordinate));
    let curve = cross * weights * model.sigma2[k];
    Ok(curve.iter().cloned().collect())
}

/// One Wald entry for a coefficient added by the augmented mean model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaldEntry {
    pub column: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
}

/// Result of testing the revival assumption by augmenting the mean model
/// with survival-time terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevivalAssumptionTest {
    /// Wald statistics of the added coefficients at the REML estimates.
    pub wald: Vec<WaldEntry>,
    /// Likelihood-ratio statistic from profile maximum likelihood, with the
    /// variance parameters re-estimated under each mean model.
    pub lr_statistic: f64,
    pub lr_df: usize,
    pub base_ml: f64,
    pub augmented_ml: f64,
    pub augmented_fit: FittedRevivalModel,
}

/// Tests the revival assumption by comparing a base mean model against an
/// augmented one that lets the mean depend on survival time.
pub fn test_revival_assumption(
    dataset: &Dataset,
    base_mean: &MeanSpec,
    augmented_mean: &MeanSpec,
    variance: &VarianceSpec,
    opts: &RemlOptions,
) -> Result<RevivalAssumptionTest> {
    if !augmented_mean.nests(base_mean) {
        return Err(Error::Prediction(
            "augmented mean model must nest the base mean model".into(),
        ));
    }
    let augmented_fit = {
        let design = build_design(dataset, augmented_mean, variance)?;
        let mut m = fit_reml_design(design, variance, opts)?;
        m.mean = augmented_mean.clone();
        m
    };

    // Columns added by the augmentation, located by name.
    let base_design = build_design(dataset, base_mean, variance)?;
    let base_names = base_design.column_names();
    let aug_names = augmented_fit.column_names();
    let ses = augmented_fit
        .standard_errors()
        .ok_or_else(|| Error::Prediction("augmented fit carries no covariance".into()))?;
    let mut wald = Vec::new();
    for (j, name) in aug_names.iter().enumerate().take(augmented_fit.n_mean_cols) {
        if !base_names.contains(name) {
            let estimate = augmented_fit.beta[j];
            let se = ses[j];
            wald.push(WaldEntry { column: name.clone(), estimate, se, z: estimate / se });
        }
    }
    let lr_df = augmented_fit.n_mean_cols - base_design.n_mean_cols;

    // Profile-ML maximization under each mean, re-estimating the variance
    // parameters; residual likelihoods with different designs would not be
    // comparable.
    let (_, _, _, base_ml, _) = fit_design_inner(&base_design, variance, opts, true)?;
    let aug_design = build_design(dataset, augmented_mean, variance)?;
    let (_, _, _, aug_ml, _) = fit_design_inner(&aug_design, variance, opts, true)?;

    Ok(RevivalAssumptionTest {
        wald,
        lr_statistic: 2.0 * (aug_ml - base_ml),
        lr_df,
        base_ml,
        augmented_ml: aug_ml,
        augmented_fit,
    })
}

/// Maximized residual log-likelihoods of the revival-time and forward-time
/// organizations of the shared temporal components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentComparison {
    pub loglik_reverse: f64,
    pub loglik_forward: f64,
    /// loglik_reverse - loglik_forward; positive favours revival alignment.
    pub delta: f64,
    /// Whether the two fits share one contrast space, making the residual
    /// likelihoods directly comparable.
    pub comparable: bool,
    pub fit_reverse: FittedRevivalModel,
    pub fit_forward: FittedRevivalModel,
}

/// Fits the model twice, with every shared temporal kernel evaluated on
/// revival time and then on forward time, and reports both maxima. Only the
/// shared components differ: per-patient kernels of |s - s'| type coincide
/// with their forward-time versions within a patient.
pub fn compare_alignment_models(
    dataset: &Dataset,
    mean: &MeanSpec,
    variance: &VarianceSpec,
    opts: &RemlOptions,
) -> Result<AlignmentComparison> {
    let temporal: Vec<usize> = variance
        .components
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            c.sharing == Sharing::Shared && !matches!(c.kernel, Kernel::Constant | Kernel::WhiteNoise)
        })
        .map(|(k, _)| k)
        .collect();
    if temporal.is_empty() {
        return Err(Error::VarianceSpec(
            "alignment comparison requires a shared temporal component".into(),
        ));
    }
    let mut forward_variance = variance.clone();
    for &k in &temporal {
        forward_variance.components[k].coordinate = Coordinate::Forward;
    }
    forward_variance.validate()?;

    let fit_reverse = {
        let design = build_design(dataset, mean, variance)?;
        let mut m = fit_reml_design(design, variance, opts)?;
        m.mean = mean.clone();
        m
    };
    let fit_forward = {
        let design = build_design(dataset, mean, &forward_variance)?;
        let mut m = fit_reml_design(design, &forward_variance, opts)?;
        m.mean = mean.clone();
        m
    };
    let comparable = fit_reverse.columns == fit_forward.columns;
    let loglik_reverse = fit_reverse.max_residual_loglik.unwrap();
    let loglik_forward = fit_forward.max_residual_loglik.unwrap();
    Ok(AlignmentComparison {
        loglik_reverse,
        loglik_forward,
        delta: loglik_reverse - loglik_forward,
        comparable,
        fit_reverse,
        fit_forward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{MeanTerm, VarianceComponent};
    use crate::kernel;
    use crate::record::{ArmSchedule, Event, HealthRecord};
    use approx::assert_relative_eq;

    fn patient(id: &str, t: Vec<f64>, y: Vec<f64>, death: f64) -> HealthRecord {
        HealthRecord {
            patient_id: id.into(),
            covariates: Default::default(),
            arm_schedule: ArmSchedule::null_only(),
            appointments: t,
            outcomes: y,
            event: Event::Death(death),
        }
    }

    fn noise_only() -> VarianceSpec {
        VarianceSpec::new(vec![VarianceComponent::new(
            "noise",
            kernel::white_noise(),
            Sharing::PerPatient,
        )])
        .unwrap()
    }

    fn toy_dataset(seed: u64, n_patients: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n_patients)
            .map(|i| {
                let death = 2.0 + 4.0 * rng.gen::<f64>();
                let k = 2 + (rng.gen::<f64>() * 3.0) as usize;
                let t: Vec<f64> =
                    (0..k).map(|j| j as f64 * death / (k as f64 + 0.5)).collect();
                let y: Vec<f64> = (0..k).map(|_| 5.0 + rng.gen::<f64>()).collect();
                patient(&format!("p{i}"), t, y, death)
            })
            .collect();
        Dataset::new(records).unwrap()
    }

    #[test]
    fn white_noise_reml_recovers_sample_variance() {
        let ds = toy_dataset(1, 8);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept]);
        let model = fit_reml(&ds, &mean, &noise_only(), &RemlOptions::default()).unwrap();
        let design = build_design(&ds, &mean, &noise_only()).unwrap();
        let s2 = sample_variance(&design.y);
        assert_relative_eq!(model.sigma2[0], s2, epsilon = 1e-10 * s2.max(1.0));
    }

    #[test]
    fn white_noise_reml_maximum_is_closed_form() {
        // The residual likelihood of an intercept-plus-noise model peaks at
        // the n-1 sample variance; check the objective agrees.
        let ds = toy_dataset(2, 6);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept]);
        let design = build_design(&ds, &mean, &noise_only()).unwrap();
        let s2 = sample_variance(&design.y);
        let at_mle = residual_loglik(&design, &noise_only(), &[s2]).unwrap();
        for factor in [0.8, 0.9, 1.1, 1.3] {
            let off = residual_loglik(&design, &noise_only(), &[s2 * factor]).unwrap();
            assert!(off < at_mle, "objective not maximal at the sample variance");
        }
    }

    fn two_component_spec() -> VarianceSpec {
        VarianceSpec::new(vec![
            VarianceComponent::new("temporal", kernel::exponential(1.5).unwrap(), Sharing::PerPatient),
            VarianceComponent::new("noise", kernel::white_noise(), Sharing::PerPatient),
        ])
        .unwrap()
    }

    #[test]
    fn doubling_outcomes_quadruples_variance_components() {
        let ds = toy_dataset(3, 10);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept]);
        let opts = RemlOptions::default();
        let fit1 = fit_reml(&ds, &mean, &two_component_spec(), &opts).unwrap();
        let doubled = Dataset::new(
            ds.records
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.outcomes.iter_mut().for_each(|y| *y *= 2.0);
                    r
                })
                .collect(),
        )
        .unwrap();
        let fit2 = fit_reml(&doubled, &mean, &two_component_spec(), &opts).unwrap();
        for (a, b) in fit1.sigma2.iter().zip(&fit2.sigma2) {
            assert_relative_eq!(4.0 * a, *b, max_relative = 1e-3);
        }
        // Fixed ranges are untouched by rescaling.
        assert_eq!(fit1.ranges[0], Some(1.5));
        assert_eq!(fit2.ranges[0], Some(1.5));
    }

    /// Orthonormal basis of the null space of X' by Gram-Schmidt against the
    /// design columns, for the explicit-contrast REML oracle.
    fn contrast_basis(x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let p = x.ncols();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        // Orthonormalize the design columns first.
        let mut q: Vec<DVector<f64>> = Vec::new();
        for j in 0..p {
            let mut v: DVector<f64> = x.column(j).into();
            for u in &q {
                let d = u.dot(&v);
                v -= u * d;
            }
            let norm = v.norm();
            assert!(norm > 1e-10, "design not full rank");
            q.push(v / norm);
        }
        for e in 0..n {
            if basis.len() == n - p {
                break;
            }
            let mut v = DVector::zeros(n);
            v[e] = 1.0;
            for u in q.iter().chain(basis.iter()) {
                let d = u.dot(&v);
                v -= u * d;
            }
            let norm = v.norm();
            if norm > 1e-8 {
                basis.push(v / norm);
            }
        }
        assert_eq!(basis.len(), n - p);
        DMatrix::from_columns(&basis.iter().map(|b| b.column(0)).collect::<Vec<_>>())
    }

    #[test]
    fn residual_loglik_matches_explicit_contrast_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..8 {
            let ds = toy_dataset(100 + trial, 5); // about 15-25 rows
            let mean = MeanSpec::new(vec![MeanTerm::Intercept, MeanTerm::SurvivalTime]);
            let spec = VarianceSpec::new(vec![
                VarianceComponent::new(
                    "trend",
                    kernel::linear_spline_generalized(),
                    Sharing::Shared,
                ),
                VarianceComponent::new(
                    "temporal",
                    kernel::exponential(1.0 + rng.gen::<f64>()).unwrap(),
                    Sharing::PerPatient,
                ),
                VarianceComponent::new("noise", kernel::white_noise(), Sharing::PerPatient),
            ])
            .unwrap();
            let design = build_design(&ds, &mean, &spec).unwrap();
            assert!(design.n_rows() <= 30);
            let sigma2 =
                vec![0.2 + rng.gen::<f64>(), 0.2 + rng.gen::<f64>(), 0.2 + rng.gen::<f64>()];
            let fast = residual_loglik(&design, &spec, &sigma2).unwrap();

            // Oracle: likelihood of contrasts w = B'y with w ~ N(0, B' Sigma B),
            // assembling Sigma from the raw generalized kernels. Contrasts
            // annihilate the drift, so the raw and representative forms agree
            // and B' Sigma B is positive definite.
            let mut sigma = DMatrix::zeros(design.n_rows(), design.n_rows());
            for (k, component) in spec.components.iter().enumerate() {
                let blocks = match component.sharing {
                    Sharing::Shared => None,
                    Sharing::PerPatient => Some(design.blocks.as_slice()),
                };
                let g = crate::kernel::gram(
                    &component.kernel,
                    design.coordinate(component.coordinate),
                    blocks,
                );
                sigma += g * sigma2[k];
            }
            // Mirror the implementation's jitter: B is orthonormal, so
            // jittering the full covariance adds the same ridge to B' Sigma B.
            let ranges: Vec<Option<f64>> =
                spec.components.iter().map(|c| c.kernel.range()).collect();
            let assembled = assemble_covariance(&design, &spec, &sigma2, &ranges).unwrap();
            let jitter = crate::linalg::jitter_magnitude(&assembled);
            let b = contrast_basis(&design.x);
            let w = b.transpose() * &design.y;
            let mut small = b.transpose() * sigma * &b;
            for i in 0..small.nrows() {
                small[(i, i)] += jitter;
            }
            let chol = small.cholesky().expect("contrast covariance is positive definite");
            let quad = chol.solve(&w).dot(&w);
            let oracle = -0.5
                * (w.len() as f64 * (2.0 * std::f64::consts::PI).ln()
                    + crate::linalg::log_det(&chol)
                    + quad);
            assert_relative_eq!(fast, oracle, epsilon = 1e-8 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn residual_loglik_invariant_under_column_reparametrization() {
        let ds = toy_dataset(6, 6);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept, MeanTerm::SurvivalTime]);
        let spec = two_component_spec();
        let design = build_design(&ds, &mean, &spec).unwrap();
        let sigma2 = [0.4, 0.8];
        let base = residual_loglik(&design, &spec, &sigma2).unwrap();
        // Invertible mix of the two columns.
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -3.0, 0.5]);
        let mut transformed = design.clone();
        transformed.x = &design.x * a;
        let mixed = residual_loglik(&transformed, &spec, &sigma2).unwrap();
        assert_relative_eq!(base, mixed, epsilon = 1e-8 * (1.0 + base.abs()));
    }

    #[test]
    fn reml_estimates_invariant_under_column_reparametrization() {
        let ds = toy_dataset(7, 8);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept, MeanTerm::SurvivalTime]);
        let spec = two_component_spec();
        let opts = RemlOptions::default();
        let design = build_design(&ds, &mean, &spec).unwrap();
        let fit = fit_reml_design(design.clone(), &spec, &opts).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, -1.0]);
        let mut transformed = design;
        transformed.x = &transformed.x.clone() * a;
        let fit_t = fit_reml_design(transformed, &spec, &opts).unwrap();
        for (a, b) in fit.sigma2.iter().zip(&fit_t.sigma2) {
            assert_relative_eq!(a, b, max_relative = 1e-6, epsilon = 1e-9);
        }
        assert_relative_eq!(
            fit.max_residual_loglik.unwrap(),
            fit_t.max_residual_loglik.unwrap(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn gls_estimating_equation_holds_at_the_fit() {
        let ds = toy_dataset(8, 8);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept, MeanTerm::SurvivalTime]);
        let spec = two_component_spec();
        let model = fit_reml(&ds, &mean, &spec, &RemlOptions::default()).unwrap();
        let design = model.training.as_ref().unwrap();
        let sigma =
            assemble_covariance(design, &spec, &model.sigma2, &model.ranges).unwrap();
        let chol = cholesky_with_jitter(sigma).unwrap();
        let resid = &design.y - &design.x * &model.beta;
        let score = design.x.transpose() * chol.solve(&resid);
        assert!(score.norm() <= 1e-8 * design.y.norm(), "score {score}");
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = toy_dataset(9, 6);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept]);
        let spec = two_component_spec();
        let opts = RemlOptions::default();
        let a = fit_reml(&ds, &mean, &spec, &opts).unwrap();
        let b = fit_reml(&ds, &mean, &spec, &opts).unwrap();
        assert_eq!(a.sigma2, b.sigma2);
        assert_eq!(a.beta, b.beta);
    }

    fn shared_trend_spec() -> VarianceSpec {
        VarianceSpec::new(vec![
            VarianceComponent::new("trend", kernel::linear_spline_generalized(), Sharing::Shared),
            VarianceComponent::new("noise", kernel::white_noise(), Sharing::PerPatient),
        ])
        .unwrap()
    }

    #[test]
    fn bayes_trajectory_vanishes_with_zero_shared_variance() {
        let ds = toy_dataset(10, 5);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept]);
        let spec = shared_trend_spec();
        let design = build_design(&ds, &mean, &spec).unwrap();
        let mut model = fit_reml_design(design, &spec, &RemlOptions::default()).unwrap();
        model.sigma2[0] = 0.0;
        let curve = bayes_trajectory(&model, "trend", &[0.5, 1.0, 2.0]).unwrap();
        assert!(curve.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bayes_trajectory_unchanged_by_constant_shift() {
        let ds = toy_dataset(11, 6);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept]);
        let spec = shared_trend_spec();
        let opts = RemlOptions::default();
        let model = fit_reml(&ds, &mean, &spec, &opts).unwrap();
        let grid = [0.5, 1.5, 3.0];
        let curve = bayes_trajectory(&model, "trend", &grid).unwrap();

        let shifted_ds = Dataset::new(
            ds.records
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.outcomes.iter_mut().for_each(|y| *y += 7.0);
                    r
                })
                .collect(),
        )
        .unwrap();
        // Same variance parameters, same design geometry: the intercept
        // absorbs the shift and the projected residual is untouched.
        let design = build_design(&shifted_ds, &mean, &spec).unwrap();
        let sigma =
            assemble_covariance(&design, &spec, &model.sigma2, &model.ranges).unwrap();
        let parts = likelihood_parts(&design, sigma, logdet_xtx(&design).unwrap()).unwrap();
        let shifted_model = FittedRevivalModel {
            beta: parts.beta,
            training: Some(design),
            ..model.clone()
        };
        let shifted_curve = bayes_trajectory(&shifted_model, "trend", &grid).unwrap();
        for (a, b) in curve.iter().zip(&shifted_curve) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn bayes_trajectory_rejects_per_patient_components() {
        let ds = toy_dataset(12, 4);
        let mean = MeanSpec::new(vec![MeanTerm::Intercept]);
        let spec = shared_trend_spec();
        let model = fit_reml(&ds, &mean, &spec, &RemlOptions::default()).unwrap();
        assert!(bayes_trajectory(&model, "noise", &[1.0]).is_err());
    }

    #[test]
    fn revival_assumption_test_requires_nesting() {
        let ds = toy_dataset(13, 5);
        let base = MeanSpec::new(vec![MeanTerm::Intercept, MeanTerm::SurvivalTime]);
        let augmented = MeanSpec::new(vec![MeanTerm::Intercept]);
        assert!(test_revival_assumption(
            &ds,
            &base,
            &augmented,
            &noise_only(),
            &RemlOptions::default()
        )
        .is_err());
    }
}
