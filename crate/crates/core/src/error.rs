use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, field {field}: {message}")]
    Parse {
        line: usize,
        field: usize,
        message: String,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("row {row}: modality {modality} is only partially observed")]
    BlockPattern { row: usize, modality: usize },

    #[error("invalid modality layout: {0}")]
    Layout(String),

    #[error("response is missing at row {0}")]
    MissingResponse(usize),

    #[error("dataset is already standardized")]
    AlreadyStandardized,

    #[error("predictors {0} and {1} share fewer than two observed samples")]
    EmptyOverlap(usize, usize),

    #[error("degenerate ratio: {0}")]
    DegenerateRatio(String),

    #[error("lower-bound quotient has non-positive denominator {0}")]
    NonPositiveDenominator(f64),

    #[error("l0 = {l0} outside [{lo}, {hi}]")]
    OutOfRange { l0: f64, lo: f64, hi: f64 },

    #[error("eigendecomposition failed to converge")]
    ConvergenceFailure,

    #[error("covariance vector is identically zero")]
    AllZeroCovariance,

    #[error("coordinate {0} has a non-positive diagonal entry")]
    ZeroDiagonal(usize),

    #[error("covariance is indefinite (minimum eigenvalue {0:.3e})")]
    Indefinite(f64),

    #[error("at lambda index {index}: {source}")]
    Path {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no feasible hyperparameter combination")]
    NoFeasibleCombination,

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("need at least {needed} complete rows, found {found}")]
    TooFewCompleteCases { needed: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema mismatch in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
