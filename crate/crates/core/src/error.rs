use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("forward cache does not match parameters or gradient: {0}")]
    StaleCache(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("IDX format error in {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("privacy budget exhausted: epsilon {spent:.4} would exceed target {target:.4}")]
    BudgetExhausted { spent: f64, target: f64 },

    #[error("no noise multiplier up to {max_sigma} reaches epsilon {target} at delta {delta}")]
    InfeasibleBudget {
        target: f64,
        delta: f64,
        max_sigma: f64,
    },

    #[error("task {task}: private training data has been retired")]
    TaskRetired { task: usize },

    #[error("task {task} was already consumed from the stream")]
    AlreadyConsumed { task: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
