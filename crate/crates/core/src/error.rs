use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite state at step {step} (t = {time})")]
    NonFiniteState { step: usize, time: f64 },

    #[error("pair {index}: path diverged after {retries} retries")]
    DivergentPair { index: usize, retries: usize },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("basis retains no bins")]
    EmptyBasis,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("all eigenmodes dropped by regularization")]
    AllModesDropped,

    #[error("requested rank {requested} exceeds effective rank {available}")]
    RankTooLarge { requested: usize, available: usize },

    #[error("no eigenvalue within {tolerance} of 1 (nearest: {nearest})")]
    NoUnitEigenvalue { nearest: f64, tolerance: f64 },

    #[error("recovered density has {fraction:.3} of its mass negative")]
    NegativeDensity { fraction: f64 },

    #[error("negative sample weight {0}")]
    NegativeWeight(f64),

    #[error("eigen-decomposition did not converge")]
    ConvergenceFailure,

    #[error("every k-means restart produced an empty cluster")]
    EmptyCluster,

    #[error("set {0} has no source points")]
    EmptySourceSet(usize),

    #[error("set {0} has zero mass")]
    ZeroMass(usize),

    #[error("{context}: {message}")]
    Io { context: String, message: String },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::DivergentPair { .. } => "DivergentPair",
            Error::UnknownScenario(_) => "UnknownScenario",
            Error::UnknownExperiment(_) => "UnknownExperiment",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::EmptyBasis => "EmptyBasis",
            Error::NotSymmetric(_) => "NotSymmetric",
            Error::AllModesDropped => "AllModesDropped",
            Error::RankTooLarge { .. } => "RankTooLarge",
            Error::NoUnitEigenvalue { .. } => "NoUnitEigenvalue",
            Error::NegativeDensity { .. } => "NegativeDensity",
            Error::NegativeWeight(_) => "NegativeWeight",
            Error::ConvergenceFailure => "ConvergenceFailure",
            Error::EmptyCluster => "EmptyCluster",
            Error::EmptySourceSet(_) => "EmptySourceSet",
            Error::ZeroMass(_) => "ZeroMass",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
        }
    }

    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            context: context.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
