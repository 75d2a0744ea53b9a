use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate batch in {op}: batch statistics need at least 2 rows, got {rows}")]
    DegenerateBatch { op: &'static str, rows: usize },

    #[error("label {label} out of range for {num_classes} classes (row {row})")]
    Label {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("checkpoint format error at `{context}`: {reason}")]
    Format { context: String, reason: String },

    #[error("cannot stratify split: {0}")]
    Split(String),

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("SWA state holds no snapshots")]
    EmptySwa,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint is epoch {last_good_epoch:?}")]
    Divergence {
        epoch: usize,
        step: usize,
        last_good_epoch: Option<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset table {path}: {reason}")]
    Table { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prepends `prefix.` to the field path of a config error.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            Error::Config { field, reason } => Error::Config {
                field: format!("{prefix}.{field}"),
                reason,
            },
            other => other,
        }
    }
}
