//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A flag, parameter, or configuration value is malformed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data violates a documented precondition (shape, symmetry,
    /// positivity, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// CSV cell that failed to parse, with its location.
    #[error("{path}: row {row}, column {column}: {message}")]
    ParseCell {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    /// CSV row with a different number of fields than the first row.
    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        path: String,
        row: usize,
        found: usize,
        expected: usize,
    },

    /// Matrix dimensions differ from what the caller required.
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, found {found_rows}x{found_cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        found_rows: usize,
        found_cols: usize,
    },

    /// An h_ik denominator of the attraction distribution is zero, so the
    /// pmf is undefined (possible with the window decay function).
    #[error("zero similarity denominator for arrival {arrival}: the pmf is undefined under this decay function")]
    ZeroSimilarityDenominator { arrival: usize },

    /// Unknown key in a configuration file.
    #[error("{path}: unknown key `{key}`; valid keys are: {valid}")]
    UnknownConfigKey {
        path: String,
        key: String,
        valid: String,
    },

    /// A numerical routine produced an unusable result (non-finite value,
    /// failed factorization).
    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data/validation, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::UnknownConfigKey { .. } => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
