use thiserror::Error;

use crate::cohort::Period;

/// Errors raised by the engine. Variants map onto the validation-vs-runtime
/// split used by the CLI and the HTTP service.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate feature code `{0}`")]
    DuplicateCode(String),

    #[error("empty feature code at position {0}")]
    EmptyCode(usize),

    #[error("feature `{0}` has no taxonomy class")]
    MissingClass(String),

    #[error("unknown feature code `{0}`")]
    UnknownFeature(String),

    #[error("pathway {intervention}->{target}: {reason}")]
    InvalidPathway {
        intervention: String,
        target: String,
        reason: String,
    },

    #[error("catalog parse error: {0}")]
    CatalogFormat(String),

    #[error("cohort format error: {0}")]
    CohortFormat(String),

    #[error("non-binary value at row {row}")]
    NonBinary { row: usize },

    #[error("duplicate patient_id `{0}`")]
    DuplicatePatient(String),

    #[error("unknown patient `{0}`")]
    UnknownPatient(String),

    #[error("empty cohort")]
    EmptyCohort,

    #[error("empty stratum: {0}")]
    EmptyStratum(String),

    #[error("zero cell: {0}")]
    ZeroCell(String),

    #[error("single-class cohort: both outcome classes are required")]
    SingleClass,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration `{parameter}`: {reason}")]
    Config { parameter: String, reason: String },

    #[error("unknown vertex ({feature}, {period})")]
    UnknownVertex { feature: String, period: Period },

    #[error("no conditional table for ({feature}, {period})")]
    MissingTable { feature: String, period: Period },

    #[error("intervention on `{0}`, which is not an intervention-class feature")]
    NotIntervention(String),

    #[error("invalid intervention `{0}`")]
    InterventionSyntax(String),

    #[error("no counterfactual below theta within the change budget (lowest risk reached {best_score:.4})")]
    NoCounterfactual { best_score: f64 },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(parameter: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            parameter: parameter.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input (as opposed to I/O or engine faults).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
