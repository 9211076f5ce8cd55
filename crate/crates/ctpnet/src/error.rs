//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank too low: {0}")]
    RankTooLow(String),

    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),

    #[error("parse error at row {row}, column {col}: {msg}")]
    ParseError { row: usize, col: String, msg: String },

    #[error("missing value at row {row}, column {col}")]
    MissingValue { row: usize, col: String },

    #[error("too few rows: got {0}, need at least 2")]
    TooFewRows(usize),

    #[error("channel {0} is constant in the training segment")]
    DegenerateChannel(String),

    #[error("series too short: {0}")]
    SeriesTooShort(String),

    #[error("length {len} is not divisible by period {period}")]
    IndivisibleLength { len: usize, period: usize },

    #[error("series is constant; autocorrelation is undefined")]
    ConstantSeries,

    #[error("no significant period: best peak {best:.4} is below threshold {threshold}")]
    NoSignificantPeriod { best: f64, threshold: f64 },

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("empty dataset: {0}")]
    DataEmpty(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}
