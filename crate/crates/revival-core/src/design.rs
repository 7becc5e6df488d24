//! Mean designs and variance-component structure for the Gaussian revival
//! model, and assembly of the stacked regression layout from a dataset.
//!
//! Stage two aligns every complete record at its terminus and stacks the
//! outcomes into one vector ordered by (patient, revival time). The mean
//! design X holds the requested terms; drift-basis columns of any generalized
//! kernel in the variance specification are appended (and de-duplicated
//! against structurally identical mean columns) to form the extended design
//! that the REML contrasts must annihilate.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{DriftFn, Kernel};
use crate::record::{Dataset, HealthRecord, NULL_ARM};

/// One term of the revival mean model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "term", rename_all = "snake_case")]
pub enum MeanTerm {
    /// Constant column.
    Intercept,
    /// Treatment factor evaluated through the reversed schedule; one dummy
    /// column per non-null level, the null arm being the reference.
    Treatment,
    /// The patient's survival time T, repeated down the patient's rows.
    SurvivalTime,
    /// A baseline covariate by name.
    Covariate { name: String },
    /// s / (gamma + s): inverse-linear rise with semi-revival time gamma.
    InverseLinear { gamma: f64 },
    /// s T / (gamma + s T): time-accelerated variant, the semi-revival time
    /// shrinking with survival.
    InverseLinearAccelerated { gamma: f64 },
    /// The revival time s itself.
    RevivalTime,
    /// log(s + offset).
    LogRevivalTime { offset: f64 },
}

/// Ordered mean terms for the revival model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSpec {
    pub terms: Vec<MeanTerm>,
}

impl MeanSpec {
    pub fn new(terms: Vec<MeanTerm>) -> Self {
        MeanSpec { terms }
    }

    /// True when every term of `base` appears in `self`.
    pub fn nests(&self, base: &MeanSpec) -> bool {
        base.terms.iter().all(|t| self.terms.contains(t))
    }
}

/// Whether a variance component is common to all patients or replicated
/// independently per patient block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    Shared,
    PerPatient,
}

/// Which time coordinate the kernel of a component is evaluated on. Forward
/// time only differs from revival time for shared components, which is
/// exactly the alignment comparison of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    #[default]
    Revival,
    Forward,
}

/// One additive variance component sigma^2_k K_k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub label: String,
    pub kernel: Kernel,
    pub sharing: Sharing,
    /// Estimate the kernel's range parameter instead of keeping it fixed.
    #[serde(default)]
    pub estimate_range: bool,
    #[serde(default)]
    pub coordinate: Coordinate,
}

impl VarianceComponent {
    pub fn new(label: &str, kernel: Kernel, sharing: Sharing) -> Self {
        VarianceComponent {
            label: label.to_string(),
            kernel,
            sharing,
            estimate_range: false,
            coordinate: Coordinate::Revival,
        }
    }
}

/// Additive variance-component structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSpec {
    pub components: Vec<VarianceComponent>,
}

impl VarianceSpec {
    pub fn new(components: Vec<VarianceComponent>) -> Result<Self> {
        let spec = VarianceSpec { components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::VarianceSpec("at least one component is required".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for c in &self.components {
            if !labels.insert(c.label.as_str()) {
                return Err(Error::VarianceSpec(format!("duplicate component label {}", c.label)));
            }
            if !c.kernel.drift_basis().is_empty() && c.sharing == Sharing::PerPatient {
                return Err(Error::VarianceSpec(format!(
                    "component {} uses a generalized kernel, which must be shared across patients",
                    c.label
                )));
            }
            if c.coordinate == Coordinate::Forward
                && c.kernel.drift_basis().iter().any(|f| !matches!(f, DriftFn::Const))
            {
                return Err(Error::VarianceSpec(format!(
                    "component {}: forward-time kernels may only carry a constant drift basis",
                    c.label
                )));
            }
            if c.estimate_range && c.kernel.range().is_none() {
                return Err(Error::VarianceSpec(format!(
                    "component {} has no range parameter to estimate",
                    c.label
                )));
            }
        }
        // The white-noise floor keeps the assembled covariance positive
        // definite whatever the other components do.
        if !self
            .components
            .iter()
            .any(|c| matches!(c.kernel, Kernel::WhiteNoise) && c.sharing == Sharing::PerPatient)
        {
            return Err(Error::VarianceSpec(
                "a per-patient white-noise component is required as the noise floor".into(),
            ));
        }
        Ok(())
    }

    pub fn component_index(&self, label: &str) -> Option<usize> {
        self.components.iter().position(|c| c.label == label)
    }
}

/// One column of the extended design, evaluable at any (s, T, arm, covariate)
/// context. Drift-basis functions map onto the same representation so that
/// structurally identical columns are stored once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MeanColumn {
    Intercept,
    TreatmentLevel(String),
    SurvivalTime,
    Covariate(String),
    InverseLinear { gamma: f64 },
    InverseLinearAccelerated { gamma: f64 },
    RevivalTime,
    LogRevivalTime { offset: f64 },
}

/// Evaluation context for one design row.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    /// Revival time of the row.
    pub s: f64,
    /// Survival time of the patient (or the candidate death time during
    /// prediction).
    pub survival_time: f64,
    /// Treatment arm prevailing at this row.
    pub arm: &'a str,
    pub covariates: &'a BTreeMap<String, f64>,
}

impl MeanColumn {
    pub fn eval(&self, ctx: &RowContext<'_>) -> Result<f64> {
        Ok(match self {
            MeanColumn::Intercept => 1.0,
            MeanColumn::TreatmentLevel(level) => {
                if ctx.arm == level {
                    1.0
                } else {
                    0.0
                }
            }
            MeanColumn::SurvivalTime => ctx.survival_time,
            MeanColumn::Covariate(name) => *ctx
                .covariates
                .get(name)
                .ok_or_else(|| Error::Dataset(format!("covariate {name} missing from a record")))?,
            MeanColumn::InverseLinear { gamma } => ctx.s / (gamma + ctx.s),
            MeanColumn::InverseLinearAccelerated { gamma } => {
                let u = ctx.s * ctx.survival_time;
                u / (gamma + u)
            }
            MeanColumn::RevivalTime => ctx.s,
            MeanColumn::LogRevivalTime { offset } => (ctx.s + offset).ln(),
        })
    }

    pub fn name(&self) -> String {
        match self {
            MeanColumn::Intercept => "intercept".into(),
            MeanColumn::TreatmentLevel(l) => format!("treatment[{l}]"),
            MeanColumn::SurvivalTime => "survival_time".into(),
            MeanColumn::Covariate(n) => format!("covariate[{n}]"),
            MeanColumn::InverseLinear { gamma } => format!("inverse_linear(gamma={gamma})"),
            MeanColumn::InverseLinearAccelerated { gamma } => {
                format!("inverse_linear_accelerated(gamma={gamma})")
            }
            MeanColumn::RevivalTime => "revival_time".into(),
            MeanColumn::LogRevivalTime { offset } => format!("log_revival_time(offset={offset})"),
        }
    }
}

fn drift_to_column(f: &DriftFn) -> MeanColumn {
    match f {
        DriftFn::Const => MeanColumn::Intercept,
        DriftFn::Coordinate => MeanColumn::RevivalTime,
        DriftFn::LogOffset(d) => MeanColumn::LogRevivalTime { offset: *d },
    }
}

/// Expands the mean terms into columns, then appends drift columns required
/// by the variance specification that are not already present. Returns the
/// columns and the number that belong to the mean model proper.
pub fn column_layout(
    mean: &MeanSpec,
    variance: &VarianceSpec,
    treatment_levels: &[String],
) -> (Vec<MeanColumn>, usize) {
    let mut columns = Vec::new();
    for term in &mean.terms {
        match term {
            MeanTerm::Intercept => columns.push(MeanColumn::Intercept),
            MeanTerm::Treatment => {
                for level in treatment_levels {
                    columns.push(MeanColumn::TreatmentLevel(level.clone()));
                }
            }
            MeanTerm::SurvivalTime => columns.push(MeanColumn::SurvivalTime),
            MeanTerm::Covariate { name } => columns.push(MeanColumn::Covariate(name.clone())),
            MeanTerm::InverseLinear { gamma } => {
                columns.push(MeanColumn::InverseLinear { gamma: *gamma })
            }
            MeanTerm::InverseLinearAccelerated { gamma } => {
                columns.push(MeanColumn::InverseLinearAccelerated { gamma: *gamma })
            }
            MeanTerm::RevivalTime => columns.push(MeanColumn::RevivalTime),
            MeanTerm::LogRevivalTime { offset } => {
                columns.push(MeanColumn::LogRevivalTime { offset: *offset })
            }
        }
    }
    let n_mean = columns.len();
    for component in &variance.components {
        for f in component.kernel.drift_basis() {
            let col = drift_to_column(&f);
            if !columns.contains(&col) {
                columns.push(col);
            }
        }
    }
    (columns, n_mean)
}

/// Stacked regression layout of the aligned complete records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevivalDesign {
    /// Extended design: mean columns then drift columns, n rows.
    pub x: DMatrix<f64>,
    /// Leading columns of `x` that belong to the mean model.
    pub n_mean_cols: usize,
    pub columns: Vec<MeanColumn>,
    pub y: DVector<f64>,
    /// Revival time per row, ascending within each patient block.
    pub s: Vec<f64>,
    /// Forward (appointment) time per row.
    pub t_forward: Vec<f64>,
    /// Survival time of the row's patient.
    pub survival_time: Vec<f64>,
    /// Contiguous row range per patient.
    pub blocks: Vec<Range<usize>>,
    pub patient_ids: Vec<String>,
    /// Sorted non-null treatment levels observed in the design rows.
    pub treatment_levels: Vec<String>,
}

impl RevivalDesign {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name()).collect()
    }

    /// Coordinate vector a component's kernel is evaluated on.
    pub fn coordinate(&self, which: Coordinate) -> &[f64] {
        match which {
            Coordinate::Revival => &self.s,
            Coordinate::Forward => &self.t_forward,
        }
    }
}

/// Rows of one aligned record, ascending in revival time.
struct AlignedRecord<'a> {
    record: &'a HealthRecord,
    death_time: f64,
    s: Vec<f64>,
    y: Vec<f64>,
    t: Vec<f64>,
}

fn align(record: &HealthRecord) -> Result<AlignedRecord<'_>> {
    let view = crate::record::reverse(record)?;
    let death_time = view.source_t;
    // Revival times come out in appointment order (decreasing); rows are
    // ordered by ascending revival time.
    let mut idx: Vec<usize> = (0..view.revival_times.len()).collect();
    idx.sort_by(|&a, &b| view.revival_times[a].total_cmp(&view.revival_times[b]));
    let s: Vec<f64> = idx.iter().map(|&i| view.revival_times[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| view.values[i]).collect();
    let t: Vec<f64> = s.iter().map(|si| death_time - si).collect();
    Ok(AlignedRecord { record, death_time, s, y, t })
}

/// Builds the stacked design from the complete records of a dataset.
///
/// Censored records are excluded: they cannot be aligned at the terminus and
/// estimating equations from complete records alone remain unbiased. Errors
/// if no complete record with outcomes exists or the extended design is rank
/// deficient.
pub fn build_design(
    dataset: &Dataset,
    mean: &MeanSpec,
    variance: &VarianceSpec,
) -> Result<RevivalDesign> {
    variance.validate()?;
    let aligned: Vec<AlignedRecord<'_>> = dataset
        .uncensored()
        .filter(|r| !r.appointments.is_empty())
        .map(align)
        .collect::<Result<_>>()?;
    if aligned.is_empty() {
        return Err(Error::Dataset("no complete records with outcomes to align".into()));
    }

    let mut levels = std::collections::BTreeSet::new();
    for a in &aligned {
        for t in &a.t {
            let arm = a.record.arm_schedule.arm_at(*t);
            if arm != NULL_ARM {
                levels.insert(arm.to_string());
            }
        }
    }
    let treatment_levels: Vec<String> = levels.into_iter().collect();
    let (columns, n_mean_cols) = column_layout(mean, variance, &treatment_levels);
    if columns.is_empty() {
        return Err(Error::Dataset("mean model has no columns".into()));
    }

    let n: usize = aligned.iter().map(|a| a.s.len()).sum();
    let p = columns.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut s = Vec::with_capacity(n);
    let mut t_forward = Vec::with_capacity(n);
    let mut survival_time = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(aligned.len());
    let mut patient_ids = Vec::with_capacity(aligned.len());

    let mut row = 0;
    for a in &aligned {
        let start = row;
        for (j, &sj) in a.s.iter().enumerate() {
            let ctx = RowContext {
                s: sj,
                survival_time: a.death_time,
                arm: a.record.arm_schedule.arm_at(a.t[j]),
                covariates: &a.record.covariates,
            };
            for (c, col) in columns.iter().enumerate() {
                x[(row, c)] = col.eval(&ctx)?;
            }
            y[row] = a.y[j];
            s.push(sj);
            t_forward.push(a.t[j]);
            survival_time.push(a.death_time);
            row += 1;
        }
        blocks.push(start..row);
        patient_ids.push(a.record.patient_id.clone());
    }

    if crate::linalg::rank(&x) < p {
        let names = columns.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ");
        return Err(Error::RankDeficient(names));
    }

    Ok(RevivalDesign {
        x,
        n_mean_cols,
        columns,
        y,
        s,
        t_forward,
        survival_time,
        blocks,
        patient_ids,
        treatment_levels,
    })
}
