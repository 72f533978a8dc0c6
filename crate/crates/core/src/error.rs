use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing value at line {line}, column {column}")]
    MissingValue { line: usize, column: usize },

    #[error("observation dates are not strictly increasing at line {line}")]
    NonMonotonicDates { line: usize },

    #[error("cannot parse tenor label `{0}`")]
    TenorParse(String),

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rate at row {row}, column {column} is not positive ({value})")]
    NonPositiveRate { row: usize, column: usize, value: f64 },

    #[error("return matrix has no nonzero singular value")]
    RankDeficient,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("calibration system diagonal entry {index} is {value:e}")]
    SingularDiagonal { index: usize, value: f64 },

    #[error("rate grid has zero width around {center}; supply an explicit window")]
    DegenerateDomain { center: f64 },

    #[error("zero pivot in linear solve at row {row}")]
    SolveFailure { row: usize },

    #[error("time schedule does not match the instrument: {0}")]
    ScheduleMismatch(String),

    #[error("singular value decomposition did not converge")]
    ConvergenceFailure,

    #[error("every predictor column has zero variance")]
    DegenerateDesign,

    #[error("error model needs positive values, got error {error:e} and estimate {estimate:e}")]
    NonPositiveError { error: f64, estimate: f64 },

    #[error("parameter space has {available} groups but {required} are required")]
    InsufficientSpace { available: usize, required: usize },

    #[error("rate {rate} lies outside the grid [{lower}, {upper}]")]
    OutOfDomain { rate: f64, lower: f64, upper: f64 },

    #[error("{failed} of {total} calibrations failed (first: {first})")]
    CalibrationFailures { failed: usize, total: usize, first: String },

    #[error("artifact provenance mismatch: {0}")]
    Provenance(String),

    #[error("{path}: {source}")]
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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient
                | Error::SingularDiagonal { .. }
                | Error::SolveFailure { .. }
                | Error::ConvergenceFailure
                | Error::DegenerateDesign
                | Error::CalibrationFailures { .. }
        )
    }
}
