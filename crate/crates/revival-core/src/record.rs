//! Data model for survival processes: patient records, treatment schedules
//! and time reversal.
//!
//! A record holds one patient's appointment times `t_1 < ... < t_k` (years
//! since recruitment), the health outcomes measured at those times, baseline
//! covariates, a treatment-arm schedule and the terminal event. Reversal maps
//! the outcome sequence onto revival time `s = T - t`, the time remaining
//! before death, which is only defined for uncensored records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The distinguished pre-randomization treatment level, in effect for t <= 0.
pub const NULL_ARM: &str = "null";

/// Days per year used for every unit conversion.
pub const DAYS_PER_YEAR: f64 = 365.25;

/// Terminal event of a patient record, in years since recruitment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Death(f64),
    Censored(f64),
}

impl Event {
    /// Time at which observation ended: death time or censoring time.
    pub fn time(&self) -> f64 {
        match self {
            Event::Death(t) | Event::Censored(t) => *t,
        }
    }

    pub fn is_death(&self) -> bool {
        matches!(self, Event::Death(_))
    }
}

/// Piecewise-constant map from forward time to treatment-arm label.
///
/// The schedule is fixed at randomization: switches carry times >= 0 and the
/// label in effect from that time onward. For every t <= 0 the arm is the
/// distinguished [`NULL_ARM`], regardless of switches at time zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSchedule {
    switches: Vec<(f64, String)>,
}

impl ArmSchedule {
    /// Schedule that stays on the null arm forever.
    pub fn null_only() -> Self {
        ArmSchedule { switches: Vec::new() }
    }

    /// Single randomized arm in effect for all t > 0.
    pub fn constant(arm: &str) -> Self {
        ArmSchedule { switches: vec![(0.0, arm.to_string())] }
    }

    /// Schedule with explicit switch times (all >= 0, strictly increasing).
    pub fn with_switches(switches: Vec<(f64, String)>) -> Result<Self> {
        for w in switches.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Dataset("arm switch times must be strictly increasing".into()));
            }
        }
        if switches.iter().any(|(t, _)| *t < 0.0 || !t.is_finite()) {
            return Err(Error::Dataset("arm switch times must be finite and >= 0".into()));
        }
        Ok(ArmSchedule { switches })
    }

    /// Arm in effect at forward time t; [`NULL_ARM`] for t <= 0.
    pub fn arm_at(&self, t: f64) -> &str {
        if t <= 0.0 {
            return NULL_ARM;
        }
        self.switches
            .iter()
            .rev()
            .find(|(switch_time, _)| *switch_time <= t)
            .map(|(_, label)| label.as_str())
            .unwrap_or(NULL_ARM)
    }

    /// Labels other than the null arm, in schedule order.
    pub fn non_null_labels(&self) -> impl Iterator<Item = &str> {
        self.switches.iter().map(|(_, l)| l.as_str()).filter(|l| *l != NULL_ARM)
    }
}

/// One patient's covariates, treatment schedule, appointments, outcomes and
/// terminal event. Times are in years; outcomes in health-index units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthRecord {
    pub patient_id: String,
    pub covariates: BTreeMap<String, f64>,
    pub arm_schedule: ArmSchedule,
    pub appointments: Vec<f64>,
    pub outcomes: Vec<f64>,
    pub event: Event,
}

/// A single invariant violation found by [`validate`]. Violations are data,
/// not failures: `validate` never errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationIssue {
    TimesNotStrictlyIncreasing,
    LengthMismatch,
    AppointmentAfterDeath,
    AppointmentAfterCensoring,
    NonPositiveDeathTime,
    NonFiniteValue,
    NegativeFirstAppointment,
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let msg = match self {
            ValidationIssue::TimesNotStrictlyIncreasing => "times not strictly increasing",
            ValidationIssue::LengthMismatch => "outcomes and appointments differ in length",
            ValidationIssue::AppointmentAfterDeath => "appointment after death",
            ValidationIssue::AppointmentAfterCensoring => "appointment after censoring",
            ValidationIssue::NonPositiveDeathTime => "death time must be positive",
            ValidationIssue::NonFiniteValue => "non-finite time or outcome",
            ValidationIssue::NegativeFirstAppointment => "appointments must start at t >= 0",
        };
        f.write_str(msg)
    }
}

/// Checks every record invariant and returns all violations (empty if valid).
pub fn validate(record: &HealthRecord) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    if record.outcomes.len() != record.appointments.len() {
        issues.push(ValidationIssue::LengthMismatch);
    }
    if record.appointments.windows(2).any(|w| w[1] <= w[0]) {
        issues.push(ValidationIssue::TimesNotStrictlyIncreasing);
    }
    if record.appointments.first().is_some_and(|t| *t < 0.0) {
        issues.push(ValidationIssue::NegativeFirstAppointment);
    }
    let finite = record.appointments.iter().chain(record.outcomes.iter()).all(|v| v.is_finite())
        && record.event.time().is_finite();
    if !finite {
        issues.push(ValidationIssue::NonFiniteValue);
    }
    match record.event {
        Event::Death(t) => {
            if t <= 0.0 {
                issues.push(ValidationIssue::NonPositiveDeathTime);
            }
            // Ties with the death time are invalid: the patient must be alive
            // at every appointment.
            if record.appointments.last().is_some_and(|last| *last >= t) {
                issues.push(ValidationIssue::AppointmentAfterDeath);
            }
        }
        Event::Censored(c) => {
            if record.appointments.last().is_some_and(|last| *last > c) {
                issues.push(ValidationIssue::AppointmentAfterCensoring);
            }
        }
    }
    issues
}

impl HealthRecord {
    pub fn is_valid(&self) -> bool {
        validate(self).is_empty()
    }

    fn ensure_valid(&self) -> Result<()> {
        let issues = validate(self);
        if issues.is_empty() {
            return Ok(());
        }
        let reasons = issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ");
        Err(Error::InvalidRecord { id: self.patient_id.clone(), reasons })
    }

    /// Death time for uncensored records.
    pub fn death_time(&self) -> Result<f64> {
        match self.event {
            Event::Death(t) => Ok(t),
            Event::Censored(_) => Err(Error::CensoredAlignment(self.patient_id.clone())),
        }
    }
}

/// The time-reversed outcome sequence Z(s) = Y(T - s) of one uncensored
/// record, with enough provenance to reconstruct the forward form exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevivalView {
    /// Revival times s_j = T - t_j, strictly decreasing and all > 0.
    pub revival_times: Vec<f64>,
    /// Outcome values in appointment order (z_j = y_j).
    pub values: Vec<f64>,
    /// Death time of the source record.
    pub source_t: f64,
}

impl RevivalView {
    /// Reconstructs the forward appointment times t_j = T - s_j.
    pub fn forward_times(&self) -> Vec<f64> {
        self.revival_times.iter().map(|s| self.source_t - s).collect()
    }
}

/// Aligns an uncensored record at its terminus: s_j = T - t_j, z_j = y_j.
///
/// Censored records cannot be aligned and are rejected.
pub fn reverse(record: &HealthRecord) -> Result<RevivalView> {
    record.ensure_valid()?;
    let t_death = record.death_time()?;
    let revival_times: Vec<f64> = record.appointments.iter().map(|t| t_death - t).collect();
    Ok(RevivalView { revival_times, values: record.outcomes.clone(), source_t: t_death })
}

/// Treatment arm at revival time s for an uncensored record: the arm in
/// effect at forward time T - s, which is the null arm whenever s >= T.
pub fn arm_at_revival(record: &HealthRecord, s: f64) -> Result<&str> {
    let t_death = record.death_time()?;
    Ok(record.arm_schedule.arm_at(t_death - s))
}

/// A collection of patient records with unique identifiers. All times are in
/// years; day-valued inputs are converted on ingestion.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<HealthRecord>,
}

impl Dataset {
    pub fn new(records: Vec<HealthRecord>) -> Result<Self> {
        let ds = Dataset { records };
        ds.ensure_unique_ids()?;
        Ok(ds)
    }

    fn ensure_unique_ids(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.patient_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate patient id {}", r.patient_id)));
            }
        }
        Ok(())
    }

    /// Records with a death event, i.e. those stage two can align.
    pub fn uncensored(&self) -> impl Iterator<Item = &HealthRecord> {
        self.records.iter().filter(|r| r.event.is_death())
    }

    pub fn n_deaths(&self) -> usize {
        self.uncensored().count()
    }

    /// Subset satisfying a predicate, e.g. a single treatment arm for
    /// stratified survival fits.
    pub fn filtered(&self, keep: impl Fn(&HealthRecord) -> bool) -> Dataset {
        Dataset { records: self.records.iter().filter(|r| keep(r)).cloned().collect() }
    }

    /// All invariant violations across records, keyed by patient id.
    pub fn validate_all(&self) -> Vec<(String, Vec<ValidationIssue>)> {
        self.records
            .iter()
            .map(|r| (r.patient_id.clone(), validate(r)))
            .filter(|(_, v)| !v.is_empty())
            .collect()
    }
}
