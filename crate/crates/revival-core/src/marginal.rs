//! Stage-one fitting of the marginal survival distribution: censored
//! exponential and Weibull maximum likelihood, and the Kaplan-Meier
//! product-limit estimator.
//!
//! The likelihood of a revival model factors into a survival part and a
//! health-sequence part, so the survival distribution is fitted on its own.
//! Kaplan-Meier fits are for reporting only: they carry no density, and the
//! predictive machinery refuses them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::golden_section;
use crate::record::Dataset;

/// One step of a Kaplan-Meier survivor function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    /// Distinct death time.
    pub time: f64,
    /// Number at risk just before `time`.
    pub n_risk: usize,
    /// Deaths at `time`.
    pub n_events: usize,
    /// Survivor value S(time), right-continuous.
    pub survivor: f64,
}

/// A fitted marginal survival distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SurvivalLaw {
    Exponential { mean: f64 },
    Weibull { shape: f64, scale: f64 },
    KaplanMeier { steps: Vec<KmStep> },
}

impl SurvivalLaw {
    pub fn is_parametric(&self) -> bool {
        !matches!(self, SurvivalLaw::KaplanMeier { .. })
    }

    /// Density f(t). Undefined for Kaplan-Meier laws.
    pub fn density(&self, t: f64) -> Result<f64> {
        match self {
            SurvivalLaw::Exponential { mean } => {
                Ok(if t < 0.0 { 0.0 } else { (-t / mean).exp() / mean })
            }
            SurvivalLaw::Weibull { shape, scale } => {
                if t < 0.0 {
                    return Ok(0.0);
                }
                if t == 0.0 {
                    // Avoid 0^(shape-1) blowing up for shape < 1.
                    return Ok(if *shape == 1.0 { 1.0 / scale } else { 0.0 });
                }
                let z = t / scale;
                Ok(shape / scale * z.powf(shape - 1.0) * (-z.powf(*shape)).exp())
            }
            SurvivalLaw::KaplanMeier { .. } => Err(Error::KaplanMeierUnsupported("density")),
        }
    }

    /// Distribution function F(t).
    pub fn cdf(&self, t: f64) -> f64 {
        match self {
            SurvivalLaw::Exponential { mean } => {
                if t <= 0.0 {
                    0.0
                } else {
                    1.0 - (-t / mean).exp()
                }
            }
            SurvivalLaw::Weibull { shape, scale } => {
                if t <= 0.0 {
                    0.0
                } else {
                    1.0 - (-(t / scale).powf(*shape)).exp()
                }
            }
            SurvivalLaw::KaplanMeier { steps } => {
                let mut s = 1.0;
                for step in steps {
                    if step.time <= t {
                        s = step.survivor;
                    } else {
                        break;
                    }
                }
                1.0 - s
            }
        }
    }

    /// Survivor function 1 - F(t).
    pub fn survivor(&self, t: f64) -> f64 {
        1.0 - self.cdf(t)
    }

    /// Hazard f(t) / (1 - F(t)). Undefined for Kaplan-Meier laws.
    pub fn hazard(&self, t: f64) -> Result<f64> {
        let s = self.survivor(t);
        Ok(self.density(t)? / s)
    }

    /// Quantile of F for p in (0, 1). For Kaplan-Meier laws this is the first
    /// step time with survivor <= 1 - p, erroring when the curve never falls
    /// that far (largest time censored).
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::SurvivalFit(format!("quantile level {p} outside [0, 1)")));
        }
        match self {
            SurvivalLaw::Exponential { mean } => Ok(-mean * (1.0 - p).ln()),
            SurvivalLaw::Weibull { shape, scale } => Ok(scale * (-(1.0 - p).ln()).powf(1.0 / shape)),
            SurvivalLaw::KaplanMeier { steps } => steps
                .iter()
                .find(|s| s.survivor <= 1.0 - p)
                .map(|s| s.time)
                .ok_or_else(|| Error::SurvivalFit(format!("Kaplan-Meier curve never reaches p = {p}"))),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            SurvivalLaw::Exponential { .. } => "exponential",
            SurvivalLaw::Weibull { .. } => "weibull",
            SurvivalLaw::KaplanMeier { .. } => "kaplan_meier",
        }
    }
}

/// Death/censoring times of a dataset: (time, died).
fn event_times(dataset: &Dataset) -> Vec<(f64, bool)> {
    dataset.records.iter().map(|r| (r.event.time(), r.event.is_death())).collect()
}

/// Censored-exponential MLE: mean = total time at risk / number of deaths.
pub fn fit_exponential(dataset: &Dataset) -> Result<SurvivalLaw> {
    let events = event_times(dataset);
    let deaths = events.iter().filter(|(_, d)| *d).count();
    if deaths == 0 {
        return Err(Error::SurvivalFit("exponential fit needs at least one death".into()));
    }
    let exposure: f64 = events.iter().map(|(t, _)| t).sum();
    Ok(SurvivalLaw::Exponential { mean: exposure / deaths as f64 })
}

/// Censored-Weibull MLE via profile likelihood on the shape.
///
/// For fixed shape k the scale has the closed form scale^k = sum(t_i^k) / d
/// over all records (deaths and censorings), leaving a one-dimensional
/// profile maximized by golden section on log-shape.
pub fn fit_weibull(dataset: &Dataset) -> Result<SurvivalLaw> {
    let events = event_times(dataset);
    let deaths: Vec<f64> = events.iter().filter(|(_, d)| *d).map(|(t, _)| *t).collect();
    if deaths.len() < 2 {
        return Err(Error::SurvivalFit("weibull fit needs at least two deaths".into()));
    }
    if deaths.iter().any(|t| *t <= 0.0) {
        return Err(Error::SurvivalFit("weibull fit needs positive death times".into()));
    }
    let d = deaths.len() as f64;
    let log_deaths: f64 = deaths.iter().map(|t| t.ln()).sum();

    let profile = |log_shape: f64| -> f64 {
        let k = log_shape.exp();
        let sum_tk: f64 = events.iter().map(|(t, _)| t.powf(k)).sum();
        // Negated profile log-likelihood.
        -(d * k.ln() + (k - 1.0) * log_deaths - d * (sum_tk / d).ln() - d)
    };

    let lo = (0.05f64).ln();
    let hi = (20.0f64).ln();
    let (log_shape, neg_ll) = golden_section(profile, lo, hi, 1e-12, 500)?;
    if !neg_ll.is_finite() {
        return Err(Error::NonConvergence("weibull profile likelihood is not finite".into()));
    }
    let shape = log_shape.exp();
    let sum_tk: f64 = events.iter().map(|(t, _)| t.powf(shape)).sum();
    let scale = (sum_tk / d).powf(1.0 / shape);
    Ok(SurvivalLaw::Weibull { shape, scale })
}

/// Log-likelihood of a parametric law on a censored dataset.
pub fn censored_log_likelihood(law: &SurvivalLaw, dataset: &Dataset) -> Result<f64> {
    let mut ll = 0.0;
    for (t, died) in event_times(dataset) {
        if died {
            ll += law.density(t)?.ln();
        } else {
            ll += law.survivor(t).ln();
        }
    }
    Ok(ll)
}

/// Standard product-limit estimator; censored records leave the risk set
/// without contributing events, with deaths processed before censorings at
/// tied times.
pub fn fit_kaplan_meier(dataset: &Dataset) -> Result<SurvivalLaw> {
    if dataset.records.is_empty() {
        return Err(Error::SurvivalFit("kaplan-meier fit needs at least one record".into()));
    }
    let mut events = event_times(dataset);
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));

    let mut steps = Vec::new();
    let mut at_risk = events.len();
    let mut survivor = 1.0;
    let mut i = 0;
    while i < events.len() {
        let time = events[i].0;
        let mut n_events = 0;
        let mut n_leaving = 0;
        while i < events.len() && events[i].0 == time {
            if events[i].1 {
                n_events += 1;
            }
            n_leaving += 1;
            i += 1;
        }
        if n_events > 0 {
            survivor *= 1.0 - n_events as f64 / at_risk as f64;
            steps.push(KmStep { time, n_risk: at_risk, n_events, survivor });
        }
        at_risk -= n_leaving;
    }
    Ok(SurvivalLaw::KaplanMeier { steps })
}
