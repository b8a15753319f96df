use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the CLI into validation failures (exit code 2)
/// and numeric failures (exit code 3); see [`Error::is_validation`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {last_estimate})")]
    Convergence {
        iterations: usize,
        last_estimate: f64,
        last_vector: Vec<f64>,
    },

    #[error("singular system: {0}; use a positive ridge")]
    Singular(String),

    #[error("degenerate kernel: profile integrates to {0}")]
    DegenerateKernel(f64),

    #[error("pathological kernel profile: acceptance rate {rate:.2e} after {attempts} attempts")]
    PathologicalProfile { rate: f64, attempts: usize },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("size budget exceeded: {0}")]
    Budget(String),

    #[error("reparameterization not applicable: {0}")]
    Applicability(String),

    #[error("function mismatch: max deviation {deviation:e} exceeds tolerance {tolerance:e}")]
    FunctionMismatch { deviation: f64, tolerance: f64 },

    #[error("label oracle failed at feature vector {feature:?}")]
    Oracle { feature: Vec<f64> },

    #[error("no sigma in [{lo:e}, {hi:e}] satisfies the deviation target")]
    Bracket { lo: f64, hi: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("parse error at byte offset {offset}: {message}")]
    BinaryParse { offset: usize, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by
    /// the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::InvalidDimension(_)
                | Error::Index(_)
                | Error::EmptyInput(_)
                | Error::Mode(_)
                | Error::Budget(_)
                | Error::Applicability(_)
                | Error::InsufficientData(_)
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::BinaryParse { .. }
                | Error::Version { .. }
                | Error::Io { .. }
        )
    }
}
