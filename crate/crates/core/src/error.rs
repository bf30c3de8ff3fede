use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("trip {0} has no data rows")]
    EmptyTrip(String),

    #[error("trip {trip}: timestamps are not uniformly spaced at {expected} s (line {line})")]
    NonUniformSampling {
        trip: String,
        expected: f64,
        line: u64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("series of length {len} is shorter than the required {required} samples")]
    TooShort { len: usize, required: usize },

    #[error("infeasible k = {k}: only {available} {what} available")]
    InfeasibleK {
        k: usize,
        available: usize,
        what: &'static str,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("window configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("feature {feature}: {message}")]
    Feature { feature: String, message: String },

    #[error("labels contain a single class; both owner and theft examples are required")]
    DegenerateLabels,

    #[error("verdict lists are misaligned: {0}")]
    Misaligned(String),

    #[error(
        "no feature passed the separation filter (best score {best_score:.4} <= threshold {threshold}); relax the separation threshold"
    )]
    NoEssentialFeatures { best_score: f64, threshold: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 = usage/config, 2 = data, 3 = infeasible model.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::InfeasibleK { .. } | Error::NoEssentialFeatures { .. } => 3,
            _ => 2,
        }
    }
}
