//! Predictive survival densities given a partial health history.
//!
//! The conditional survival density at t is proportional to f(t) g(y; t - t),
//! the marginal density times the likelihood of the observed outcomes under
//! the revival model with the death time as a temporal offset. The
//! appointment-schedule factor is treated as constant (administrative
//! scheduling); a user-supplied log-weight hook can reintroduce it.
//!
//! Two prediction modes are supported. `Marginal` treats the new patient as
//! independent given the fixed effects: the outcomes are Gaussian with mean
//! X* beta and the full component covariance at the reversed offsets.
//! `Conditional` computes the moments of the new patient given all training
//! data (shared components couple the patients), which is the universal
//! kriging predictive distribution and is well defined for generalized
//! kernels whose drift the extended design spans.

use std::cell::RefCell;
use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::design::{Coordinate, RowContext, Sharing};
use crate::error::{Error, Result};
use crate::kernel::{gram_cross_proper, gram_proper};
use crate::linalg::{cholesky_with_jitter, log_det};
use crate::marginal::SurvivalLaw;
use crate::quad::{adaptive_simpson, suffix_trapezoid, trapezoid};
use crate::record::{ArmSchedule, Event, HealthRecord};
use crate::reml::{assemble_covariance, FittedRevivalModel};

/// A partial health history for prediction: appointments observed so far and
/// the covariate/treatment context of the patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientHistory {
    pub appointments: Vec<f64>,
    pub outcomes: Vec<f64>,
    pub arm_schedule: ArmSchedule,
    pub covariates: BTreeMap<String, f64>,
}

impl PatientHistory {
    pub fn new(appointments: Vec<f64>, outcomes: Vec<f64>) -> Result<Self> {
        Self::with_context(appointments, outcomes, ArmSchedule::null_only(), BTreeMap::new())
    }

    pub fn with_context(
        appointments: Vec<f64>,
        outcomes: Vec<f64>,
        arm_schedule: ArmSchedule,
        covariates: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if appointments.len() != outcomes.len() {
            return Err(Error::Prediction("appointments and outcomes differ in length".into()));
        }
        if appointments.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Prediction("appointments must be strictly increasing".into()));
        }
        Ok(PatientHistory { appointments, outcomes, arm_schedule, covariates })
    }

    /// History of a record's observed appointments.
    pub fn from_record(record: &HealthRecord) -> Self {
        PatientHistory {
            appointments: record.appointments.clone(),
            outcomes: record.outcomes.clone(),
            arm_schedule: record.arm_schedule.clone(),
            covariates: record.covariates.clone(),
        }
    }

    /// Time of the most recent appointment; zero for an empty history.
    pub fn last_appointment(&self) -> f64 {
        self.appointments.last().copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.appointments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.appointments.is_empty()
    }
}

/// How the new patient's Gaussian moments are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Conditional when the model has a shared component and training data,
    /// marginal otherwise.
    #[default]
    Auto,
    Marginal,
    Conditional,
}

/// Grid settings for predictive curves: geometric spacing from just after the
/// last appointment out to an upper quantile of the marginal law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub points: usize,
    /// Offset of the first grid point after the last appointment (years).
    pub start_offset: f64,
    /// Upper quantile of the marginal law ending the grid.
    pub upper_quantile: f64,
    /// Explicit grid overriding the geometric construction.
    pub explicit: Option<Vec<f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            points: 2000,
            start_offset: 1.0 / crate::record::DAYS_PER_YEAR,
            upper_quantile: 0.9999,
            explicit: None,
        }
    }
}

impl GridConfig {
    /// Builds the evaluation grid above the last appointment time.
    pub fn build(&self, law: &SurvivalLaw, last_appointment: f64) -> Result<Vec<f64>> {
        if let Some(grid) = &self.explicit {
            if grid.is_empty() {
                return Err(Error::Prediction("explicit grid is empty".into()));
            }
            if grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Prediction("explicit grid must be increasing".into()));
            }
            if grid[0] <= last_appointment {
                return Err(Error::Prediction("grid must start after the last appointment".into()));
            }
            return Ok(grid.clone());
        }
        if self.points < 2 {
            return Err(Error::Prediction("grid needs at least two points".into()));
        }
        let upper = law.quantile(self.upper_quantile)?;
        let span = upper - last_appointment;
        if span <= self.start_offset {
            return Err(Error::Prediction(format!(
                "history end {last_appointment} leaves no room below the {} quantile {upper}",
                self.upper_quantile
            )));
        }
        let m = self.points;
        let ratio = (span / self.start_offset).powf(1.0 / (m as f64 - 1.0));
        let mut grid = Vec::with_capacity(m);
        let mut offset = self.start_offset;
        for _ in 0..m {
            grid.push(last_appointment + offset);
            offset *= ratio;
        }
        // Pin the endpoint exactly.
        *grid.last_mut().unwrap() = last_appointment + span;
        Ok(grid)
    }
}

/// A predictive survival curve on a grid of candidate death times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveCurve {
    pub grid: Vec<f64>,
    /// log g(y; t - t) per grid point, the log modification factor.
    pub log_ratio: Vec<f64>,
    /// Normalized predictive density f(t) g / integral.
    pub density: Vec<f64>,
    /// Predictive-to-marginal hazard ratio per point.
    pub hazard_ratio: Vec<f64>,
}

struct TrainingCtx {
    chol: Cholesky<f64, Dyn>,
    /// Sigma^{-1} (y - X beta).
    kriging_weights: DVector<f64>,
    /// Sigma^{-1} X.
    whitened_design: DMatrix<f64>,
    /// Cholesky of X' Sigma^{-1} X.
    m_chol: Cholesky<f64, Dyn>,
}

/// Evaluates the revival-model density of a new patient's outcomes at
/// candidate death times. Construction factors the training covariance once,
/// so one predictor should be reused across a grid.
pub struct RevivalPredictor<'a> {
    model: &'a FittedRevivalModel,
    mode: PredictionMode,
    training: Option<TrainingCtx>,
    /// Covariance cache when every kernel is stationary and proper: the
    /// new-patient covariance then depends only on appointment lags.
    stationary_cov: Option<DMatrix<f64>>,
    history_len: usize,
}

impl<'a> RevivalPredictor<'a> {
    pub fn new(model: &'a FittedRevivalModel, mode: PredictionMode) -> Result<Self> {
        let resolved = match mode {
            PredictionMode::Auto => {
                if model.has_shared_component() && model.training.is_some() {
                    PredictionMode::Conditional
                } else {
                    PredictionMode::Marginal
                }
            }
            m => m,
        };
        let training = if resolved == PredictionMode::Conditional {
            let design = model.training.as_ref().ok_or_else(|| {
                Error::Prediction("conditional prediction requires training data".into())
            })?;
            let sigma = assemble_covariance(design, &model.variance, &model.sigma2, &model.ranges)?;
            let chol = cholesky_with_jitter(sigma)?;
            let resid = &design.y - &design.x * &model.beta;
            let kriging_weights = chol.solve(&resid);
            let whitened_design = chol.solve(&design.x);
            let m = design.x.transpose() * &whitened_design;
            let m_chol = m.cholesky().ok_or(Error::Factorization)?;
            Some(TrainingCtx { chol, kriging_weights, whitened_design, m_chol })
        } else {
            None
        };
        Ok(RevivalPredictor {
            model,
            mode: resolved,
            training,
            stationary_cov: None,
            history_len: 0,
        })
    }

    pub fn mode(&self) -> PredictionMode {
        self.mode
    }

    fn kernels_cacheable(&self) -> bool {
        self.model
            .variance
            .components
            .iter()
            .all(|c| c.kernel.is_stationary() && c.kernel.drift_basis().is_empty())
    }

    /// Reversed offsets of the history's appointments from candidate time t,
    /// in appointment order.
    fn offsets(history: &PatientHistory, t: f64) -> Vec<f64> {
        history.appointments.iter().map(|a| t - a).collect()
    }

    fn design_rows(&self, history: &PatientHistory, t: f64) -> Result<DMatrix<f64>> {
        let k = history.len();
        let p = self.model.columns.len();
        let mut x = DMatrix::zeros(k, p);
        for (j, &a) in history.appointments.iter().enumerate() {
            let ctx = RowContext {
                s: t - a,
                survival_time: t,
                arm: history.arm_schedule.arm_at(a),
                covariates: &history.covariates,
            };
            for (c, col) in self.model.columns.iter().enumerate() {
                x[(j, c)] = col.eval(&ctx)?;
            }
        }
        Ok(x)
    }

    /// Covariance of the new patient's outcomes at the reversed offsets.
    fn new_patient_cov(&mut self, history: &PatientHistory, t: f64) -> Result<DMatrix<f64>> {
        if let Some(cached) = &self.stationary_cov {
            if self.history_len == history.len() {
                return Ok(cached.clone());
            }
        }
        let offsets = Self::offsets(history, t);
        let k = offsets.len();
        let mut cov = DMatrix::zeros(k, k);
        for (idx, component) in self.model.variance.components.iter().enumerate() {
            let kernel = self.model.component_kernel(idx)?;
            let points: Vec<f64> = match component.coordinate {
                Coordinate::Revival => offsets.clone(),
                Coordinate::Forward => history.appointments.clone(),
            };
            cov += gram_proper(&kernel, &points, None) * self.model.sigma2[idx];
        }
        if self.kernels_cacheable() {
            self.stationary_cov = Some(cov.clone());
            self.history_len = history.len();
        }
        Ok(cov)
    }

    /// Cross-covariance between training rows and the new patient through the
    /// shared components.
    fn cross_cov(&self, history: &PatientHistory, t: f64) -> Result<DMatrix<f64>> {
        let design = self.model.training.as_ref().expect("conditional mode has training");
        let offsets = Self::offsets(history, t);
        let mut cross = DMatrix::zeros(design.n_rows(), offsets.len());
        for (idx, component) in self.model.variance.components.iter().enumerate() {
            if component.sharing != Sharing::Shared {
                continue;
            }
            let kernel = self.model.component_kernel(idx)?;
            let new_points: Vec<f64> = match component.coordinate {
                Coordinate::Revival => offsets.clone(),
                Coordinate::Forward => history.appointments.clone(),
            };
            let train_points = design.coordinate(component.coordinate);
            cross += gram_cross_proper(&kernel, train_points, &new_points) * self.model.sigma2[idx];
        }
        Ok(cross)
    }

    /// Mean and covariance of the new patient's outcome vector for candidate
    /// death time t, plus the new-patient design rows.
    pub fn moments(
        &mut self,
        history: &PatientHistory,
        t: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let x_new = self.design_rows(history, t)?;
        let base_mean = &x_new * &self.model.beta;
        let own_cov = self.new_patient_cov(history, t)?;
        match self.mode {
            PredictionMode::Marginal => Ok((base_mean, own_cov, x_new)),
            PredictionMode::Conditional => {
                let ctx = self.training.as_ref().expect("conditional mode has context");
                let cross = self.cross_cov(history, t)?;
                let mean = &base_mean + cross.transpose() * &ctx.kriging_weights;
                let solved = ctx.chol.solve(&cross);
                // Universal-kriging variance: own covariance minus the part
                // explained by training data, plus coefficient uncertainty
                // through R = X* - C' Sigma^{-1} X.
                let r = &x_new - cross.transpose() * &ctx.whitened_design;
                let v = own_cov - cross.transpose() * solved + &r * ctx.m_chol.solve(&r.transpose());
                Ok((mean, v, x_new))
            }
            PredictionMode::Auto => unreachable!("mode resolved in constructor"),
        }
    }

    /// log g(y; t - t): the log density of the observed outcomes under the
    /// revival model with temporal offset t. Returns negative infinity when
    /// t does not exceed the final appointment (the ratio vanishes there).
    pub fn log_density_ratio(&mut self, history: &PatientHistory, t: f64) -> Result<f64> {
        if history.is_empty() {
            return Ok(0.0);
        }
        if t <= history.last_appointment() {
            return Ok(f64::NEG_INFINITY);
        }
        let (mean, cov, _) = self.moments(history, t)?;
        let y = DVector::from_vec(history.outcomes.clone());
        let chol = cholesky_with_jitter(cov)?;
        let resid = &y - &mean;
        let quad = chol.solve(&resid).dot(&resid);
        Ok(-0.5
            * (history.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det(&chol) + quad))
    }
}

/// log g(y; t - t) for a single candidate time. For repeated evaluation on a
/// grid build one [`RevivalPredictor`] instead.
pub fn log_density_ratio(
    history: &PatientHistory,
    model: &FittedRevivalModel,
    t: f64,
    mode: PredictionMode,
) -> Result<f64> {
    RevivalPredictor::new(model, mode)?.log_density_ratio(history, t)
}

/// The closed-form predictive density ratio for a linear reverse-time mean
/// alpha + beta s and an offset-independent covariance: the ratio at t is a
/// Gaussian density evaluated at beta t.
#[derive(Debug, Clone)]
pub struct ClosedFormLinearRatio {
    pub beta: f64,
    /// Precision-weighted outcome average, minus alpha, plus beta times the
    /// weighted appointment average.
    pub center: f64,
    /// 1 / (1' Sigma^{-1} 1).
    pub variance: f64,
}

impl ClosedFormLinearRatio {
    pub fn log_ratio(&self, t: f64) -> f64 {
        let u = self.beta * t;
        -0.5 * (2.0 * std::f64::consts::PI * self.variance).ln()
            - (u - self.center).powi(2) / (2.0 * self.variance)
    }
}

/// Builds the closed-form ratio from the precision-weighted averages of one
/// patient's history. `sigma` is the outcome covariance, constant in t.
pub fn closed_form_linear_ratio(
    appointments: &[f64],
    outcomes: &[f64],
    alpha: f64,
    beta: f64,
    sigma: &DMatrix<f64>,
) -> Result<ClosedFormLinearRatio> {
    let k = appointments.len();
    if k == 0 || outcomes.len() != k || sigma.nrows() != k || sigma.ncols() != k {
        return Err(Error::Prediction("mismatched history and covariance sizes".into()));
    }
    // Same jittered factorization as the direct density path, so the two
    // routes agree beyond the documented jitter scale.
    let chol = cholesky_with_jitter(sigma.clone())?;
    let ones = DVector::from_element(k, 1.0);
    let wi_ones = chol.solve(&ones);
    let denom = ones.dot(&wi_ones);
    if denom <= 0.0 {
        return Err(Error::Factorization);
    }
    let y = DVector::from_column_slice(outcomes);
    let tv = DVector::from_column_slice(appointments);
    let y_bar = wi_ones.dot(&y) / denom;
    let t_bar = wi_ones.dot(&tv) / denom;
    Ok(ClosedFormLinearRatio { beta, center: y_bar - alpha + beta * t_bar, variance: 1.0 / denom })
}

/// Assembles a normalized predictive curve from log-ratio values on a grid.
///
/// Beyond the last grid point the ratio is frozen at its final value, which
/// keeps the survivor strictly positive on the grid and the hazard stable at
/// the endpoint. The density column is normalized over the grid plus that
/// frozen tail.
pub(crate) fn assemble_curve(
    grid: Vec<f64>,
    log_ratio: Vec<f64>,
    law: &SurvivalLaw,
) -> Result<PredictiveCurve> {
    let max_lr = log_ratio.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_lr.is_finite() {
        return Err(Error::Prediction("modification factor vanishes on the whole grid".into()));
    }
    let weights: Vec<f64> = grid
        .iter()
        .zip(&log_ratio)
        .map(|(t, lr)| Ok(law.density(*t)? * (lr - max_lr).exp()))
        .collect::<Result<_>>()?;
    let t_end = *grid.last().unwrap();
    let tail = (log_ratio.last().unwrap() - max_lr).exp() * law.survivor(t_end);
    let mass = trapezoid(&grid, &weights) + tail;
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::Prediction("predictive density has no mass on the grid".into()));
    }
    let density: Vec<f64> = weights.iter().map(|w| w / mass).collect();
    let suffix = suffix_trapezoid(&grid, &weights);
    let mut hazard_ratio = Vec::with_capacity(grid.len());
    for (i, t) in grid.iter().enumerate() {
        let survivor_pred = (suffix[i] + tail) / mass;
        let pred_hazard = density[i] / survivor_pred;
        let marginal_hazard = law.hazard(*t)?;
        hazard_ratio.push(pred_hazard / marginal_hazard);
    }
    Ok(PredictiveCurve { grid, log_ratio, density, hazard_ratio })
}

/// Predictive survival density, normalized over the grid, with the log
/// modification factor and the hazard ratio per grid point.
pub fn predictive_survival(
    history: &PatientHistory,
    law: &SurvivalLaw,
    model: &FittedRevivalModel,
    grid_config: &GridConfig,
    mode: PredictionMode,
) -> Result<PredictiveCurve> {
    if !law.is_parametric() {
        return Err(Error::KaplanMeierUnsupported("predictive survival"));
    }
    let grid = grid_config.build(law, history.last_appointment())?;
    let mut predictor = RevivalPredictor::new(model, mode)?;
    let log_ratio: Vec<f64> =
        grid.iter().map(|t| predictor.log_density_ratio(history, *t)).collect::<Result<_>>()?;
    assemble_curve(grid, log_ratio, law)
}

/// Mean and standard deviation of the predictive distribution, including the
/// frozen-ratio tail mass beyond the grid.
pub fn curve_mean_sd(curve: &PredictiveCurve, law: &SurvivalLaw) -> Result<(f64, f64)> {
    let t_end = *curve.grid.last().unwrap();
    let m1_grid: Vec<f64> = curve.grid.iter().zip(&curve.density).map(|(t, d)| t * d).collect();
    let m2_grid: Vec<f64> =
        curve.grid.iter().zip(&curve.density).map(|(t, d)| t * t * d).collect();
    let mut mean = trapezoid(&curve.grid, &m1_grid);
    let mut second = trapezoid(&curve.grid, &m2_grid);
    // Tail: under the frozen ratio the density beyond the grid is
    // (d_end / f(t_end)) f(t).
    let f_end = law.density(t_end)?;
    if f_end > 0.0 {
        let scale = curve.density.last().unwrap() / f_end;
        if scale > 0.0 {
            let far_q = 1.0 - 1e-9 * law.survivor(t_end).max(1e-12);
            let far = law.quantile(far_q.min(1.0 - 1e-15))?.max(t_end * 1.5);
            let m1_tail =
                adaptive_simpson(&|t: f64| law.density(t).unwrap_or(0.0) * t, t_end, far, 1e-9)?;
            let m2_tail = adaptive_simpson(
                &|t: f64| law.density(t).unwrap_or(0.0) * t * t,
                t_end,
                far,
                1e-9,
            )?;
            mean += scale * m1_tail;
            second += scale * m2_tail;
        }
    }
    let variance = (second - mean * mean).max(0.0);
    Ok((mean, variance.sqrt()))
}

/// Conditional quantile bound for integrating beyond a censoring time: the u
/// with (1 - F(u)) = (1 - upper_quantile)(1 - F(c)).
fn conditional_upper(law: &SurvivalLaw, c: f64, upper_quantile: f64) -> Result<f64> {
    let target = 1.0 - (1.0 - upper_quantile) * law.survivor(c);
    let u = law.quantile(target.min(1.0 - 1e-15))?;
    Ok(u.max(c * (1.0 + 1e-9) + 1e-9))
}

fn probe_peak(
    predictor: &mut RevivalPredictor<'_>,
    history: &PatientHistory,
    lower: f64,
    upper: f64,
) -> Result<f64> {
    let mut peak = f64::NEG_INFINITY;
    let probes = 48;
    for i in 0..=probes {
        let t = lower + (upper - lower) * (i as f64 + 0.5) / (probes as f64 + 1.0);
        let lr = predictor.log_density_ratio(history, t)?;
        if lr.is_finite() {
            peak = peak.max(lr);
        }
    }
    if !peak.is_finite() {
        return Err(Error::Quadrature("modification factor vanishes beyond censoring".into()));
    }
    Ok(peak)
}

/// Log of the additional likelihood factor contributed by a censored record:
/// the survivor-normalized integral of f(t) g(y; t - t_c) beyond the
/// censoring time, by adaptive Simpson quadrature at relative tolerance 1e-8
/// up to the conditional 0.9999 quantile.
pub fn censored_contribution(
    record: &HealthRecord,
    law: &SurvivalLaw,
    model: &FittedRevivalModel,
    mode: PredictionMode,
) -> Result<f64> {
    let c = match record.event {
        Event::Censored(c) => c,
        Event::Death(_) => {
            return Err(Error::Prediction("censored contribution applies to censored records".into()))
        }
    };
    if !law.is_parametric() {
        return Err(Error::KaplanMeierUnsupported("censored contribution"));
    }
    let history = PatientHistory::from_record(record);
    let mut predictor = RevivalPredictor::new(model, mode)?;
    let lower = c.max(history.last_appointment());
    let upper = conditional_upper(law, lower, 0.9999)?;
    let peak = probe_peak(&mut predictor, &history, lower, upper)?;

    // Frozen-ratio tail beyond the conditional quantile completes the unit
    // mass of f / (1 - F(c)).
    let tail = (predictor.log_density_ratio(&history, upper)? - peak).exp() * law.survivor(upper);
    let cell = RefCell::new(predictor);
    let integrand = |t: f64| -> f64 {
        let lr = cell
            .borrow_mut()
            .log_density_ratio(&history, t)
            .unwrap_or(f64::NEG_INFINITY);
        if !lr.is_finite() {
            return 0.0;
        }
        law.density(t).unwrap_or(0.0) * (lr - peak).exp()
    };
    let value = adaptive_simpson(&integrand, lower, upper, 1e-8)? + tail;
    if !(value > 0.0) {
        return Err(Error::Quadrature("censored contribution integrated to zero".into()));
    }
    Ok(value.ln() + peak - law.survivor(c).ln())
}

/// Which revival-model parameter a score is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaComponent {
    /// Coefficient of an extended-design column, by index.
    MeanCoefficient(usize),
    /// Variance coefficient of a component, by index.
    VarianceComponent(usize),
}

/// d log g / d theta at a fixed candidate time, in marginal mode.
fn score_at(
    predictor: &mut RevivalPredictor<'_>,
    history: &PatientHistory,
    t: f64,
    theta: ThetaComponent,
) -> Result<f64> {
    let (mean, cov, x_new) = predictor.moments(history, t)?;
    let y = DVector::from_vec(history.outcomes.clone());
    let chol = cholesky_with_jitter(cov)?;
    let resid = &y - &mean;
    let alpha = chol.solve(&resid);
    match theta {
        ThetaComponent::MeanCoefficient(j) => {
            if j >= x_new.ncols() {
                return Err(Error::Prediction(format!("no design column {j}")));
            }
            Ok(x_new.column(j).dot(&alpha))
        }
        ThetaComponent::VarianceComponent(k) => {
            let component = predictor
                .model
                .variance
                .components
                .get(k)
                .ok_or_else(|| Error::Prediction(format!("no variance component {k}")))?;
            let kernel = predictor.model.component_kernel(k)?;
            let points: Vec<f64> = match component.coordinate {
                Coordinate::Revival => RevivalPredictor::offsets(history, t),
                Coordinate::Forward => history.appointments.clone(),
            };
            let g = gram_proper(&kernel, &points, None);
            let quad = (&g * &alpha).dot(&alpha);
            let trace = chol.solve(&g).trace();
            Ok(0.5 * (quad - trace))
        }
    }
}

/// Score of a revival parameter generated by one record.
///
/// A complete record contributes the derivative of log g at its death time;
/// a censored record contributes the predictive expectation of that
/// derivative over the conditional survival distribution beyond censoring,
/// which equals the derivative of the log censored contribution. Implemented
/// for marginal-mode densities, where the derivative has the standard
/// Gaussian closed form.
pub fn censored_score(
    record: &HealthRecord,
    law: &SurvivalLaw,
    model: &FittedRevivalModel,
    theta: ThetaComponent,
) -> Result<f64> {
    let mut predictor = RevivalPredictor::new(model, PredictionMode::Marginal)?;
    let history = PatientHistory::from_record(record);
    match record.event {
        Event::Death(t) => score_at(&mut predictor, &history, t, theta),
        Event::Censored(c) => {
            if !law.is_parametric() {
                return Err(Error::KaplanMeierUnsupported("censored score"));
            }
            let lower = c.max(history.last_appointment());
            let upper = conditional_upper(law, lower, 0.9999)?;
            let peak = probe_peak(&mut predictor, &history, lower, upper)?;
            // Tail terms mirror the frozen ratio used by the contribution, so
            // the score stays the exact derivative of its logarithm.
            let tail_weight =
                (predictor.log_density_ratio(&history, upper)? - peak).exp() * law.survivor(upper);
            let tail_score = score_at(&mut predictor, &history, upper, theta)?;
            let cell = RefCell::new(predictor);
            let weight = |t: f64| -> f64 {
                let lr = cell
                    .borrow_mut()
                    .log_density_ratio(&history, t)
                    .unwrap_or(f64::NEG_INFINITY);
                if !lr.is_finite() {
                    return 0.0;
                }
                law.density(t).unwrap_or(0.0) * (lr - peak).exp()
            };
            let denominator = adaptive_simpson(&weight, lower, upper, 1e-8)? + tail_weight;
            let weighted_score = |t: f64| -> f64 {
                let mut p = cell.borrow_mut();
                let lr = p.log_density_ratio(&history, t).unwrap_or(f64::NEG_INFINITY);
                if !lr.is_finite() {
                    return 0.0;
                }
                let u = score_at(&mut p, &history, t, theta).unwrap_or(0.0);
                law.density(t).unwrap_or(0.0) * (lr - peak).exp() * u
            };
            let numerator = adaptive_simpson(&weighted_score, lower, upper, 1e-8)?
                + tail_weight * tail_score;
            if !(denominator > 0.0) {
                return Err(Error::Quadrature("score denominator vanished".into()));
            }
            Ok(numerator / denominator)
        }
    }
}
