//! Revival models for survival processes: time-reversed Gaussian
//! health-sequence models fitted jointly with marginal survival laws.
//!
//! The crate provides
//! - a data model for survival processes and time reversal ([`record`]),
//! - covariance kernels on revival time, including generalized covariances
//!   with drift bases ([`kernel`]),
//! - stage-one marginal survival fits ([`marginal`]),
//! - stage-two Gaussian revival models estimated by REML ([`design`],
//!   [`reml`]),
//! - predictive survival densities given partial health histories
//!   ([`predictor`]),
//! - Poisson revival models for recurrent events ([`poisson`]),
//! - seeded simulation ([`sim`]) and alignment diagnostics ([`diagnostics`]),
//! - CSV ingestion and the serializable model/config formats ([`io`],
//!   [`config`]).

pub mod config;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod marginal;
pub mod optim;
pub mod poisson;
pub mod predictor;
pub mod quad;
pub mod record;
pub mod reml;
pub mod sim;

pub use error::{Error, Result};
pub use kernel::{DriftFn, Kernel};
pub use marginal::SurvivalLaw;
pub use record::{ArmSchedule, Dataset, Event, HealthRecord, RevivalView, NULL_ARM};
