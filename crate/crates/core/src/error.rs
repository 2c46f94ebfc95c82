use std::fmt;

use thiserror::Error;

/// Identifies a single measurement record in a [`crate::graph::FactorGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MeasurementId {
    /// Index into the odometry list (0-based).
    Odometry(usize),
    /// Index into the homing list (0-based).
    Homing(usize),
}

impl fmt::Display for MeasurementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeasurementId::Odometry(i) => write!(f, "odometry #{i}"),
            MeasurementId::Homing(i) => write!(f, "homing #{i}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector `{what}` (norm {norm:e})")]
    DegenerateVector { what: &'static str, norm: f64 },

    #[error("covariance matrix is not symmetric positive definite")]
    InvalidCovariance,

    #[error("malformed graph: {0}")]
    MalformedGraph(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid {record}: {msg}")]
    Validation { record: String, msg: String },

    #[error("state vector has length {got}, layout expects {expected}")]
    Layout { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("{id}: {source}")]
    Measurement {
        id: MeasurementId,
        #[source]
        source: Box<Error>,
    },

    #[error("finite-difference oracle hit a non-finite value at coordinate {coord}")]
    Oracle { coord: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_measurement(self, id: MeasurementId) -> Self {
        Error::Measurement {
            id,
            source: Box::new(self),
        }
    }

    /// Strips any measurement wrapper and returns the underlying cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::Measurement { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
