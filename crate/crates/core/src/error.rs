use thiserror::Error;

/// Errors raised by the simulator and its controllers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("port has a non-zero configuration block (residual {residual:e})")]
    ConfigurationBlock { residual: f64 },

    #[error("invalid robot parameters: {0}")]
    InvalidParams(String),

    #[error("near-singular base constraint matrix (|det| = {det:e})")]
    SingularConstraint { det: f64 },

    #[error("dynamic singularity: task row norm {norm:e} at or below threshold {threshold:e}")]
    DynamicSingularity { norm: f64, threshold: f64 },

    #[error("gain synthesis frozen: {0}")]
    GainFreeze(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("gain freeze persisted {elapsed:.2} s (timeout {timeout:.2} s) at t = {t:.3} s")]
    GainFreezeTimeout { t: f64, elapsed: f64, timeout: f64 },

    #[error("numeric abort at t = {t:.6} s: {reason}")]
    NumericAbort { t: f64, reason: String },

    #[error("log schema mismatch: {0}")]
    Schema(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidParams(_) | Error::Schema(_) => 2,
            Error::GainFreezeTimeout { .. } => 4,
            Error::Io(_) | Error::Checkpoint(_) => 1,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
