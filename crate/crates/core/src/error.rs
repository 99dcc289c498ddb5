use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `key` is the dotted path of
    /// the offending entry, e.g. `hawkes.alpha`.
    #[error("invalid configuration at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("event at t={time} precedes current time t={now}")]
    OutOfOrder { time: f64, now: f64 },

    #[error("branching matrix spectral radius {radius:.6} is not below 1")]
    Unstable { radius: f64 },

    #[error("truncation bound {bound} does not exceed jump location {loc}")]
    DegenerateSupport { bound: f64, loc: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("environment state error: {0}")]
    State(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("insufficient data: need at least {need} samples, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("non-finite value in {what} at env step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
