use thiserror::Error;

/// Errors surfaced by model construction, fitting and prediction.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot align censored record at terminus (patient {0})")]
    CensoredAlignment(String),

    #[error("record {id} is invalid: {reasons}")]
    InvalidRecord { id: String, reasons: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("kernel parameter out of range: {0}")]
    KernelParam(String),

    #[error("mean design is rank deficient (columns: {0})")]
    RankDeficient(String),

    #[error("variance specification error: {0}")]
    VarianceSpec(String),

    #[error("covariance factorization failed after jitter")]
    Factorization,

    #[error("optimizer failed to converge: {0}")]
    NonConvergence(String),

    #[error("survival fit error: {0}")]
    SurvivalFit(String),

    #[error("{0} is not defined for a Kaplan-Meier law")]
    KaplanMeierUnsupported(&'static str),

    #[error("prediction error: {0}")]
    Prediction(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("recurrent-event model error: {0}")]
    Recurrent(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("csv parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
