//! Crate-wide error type.
//!
//! Errors are grouped so the CLI can map them onto stable exit codes:
//! configuration and usage problems, data problems (malformed or
//! inconsistent inputs), and numeric failures during training.

use std::path::PathBuf;

/// All failures surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad field values, inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Structurally invalid or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A raw record could not be adapted into a training instance.
    #[error("ingestion error in record `{record}`: {message}")]
    Ingestion { record: String, message: String },

    /// A parsed instance violates an invariant (bad span bounds, empty fields).
    #[error("invalid instance `{id}`: {message}")]
    Invariant { id: String, message: String },

    /// A line of an on-disk file failed to parse.
    #[error("{}:{line}: malformed record: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Checkpoint file is corrupt or incompatible with the current model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error(
        "non-finite loss on instance `{instance_id}`: \
         generation={generation} classification={classification} \
         contrastive={contrastive} joint={joint}"
    )]
    NonFiniteLoss {
        instance_id: String,
        generation: f64,
        classification: f64,
        contrastive: f64,
        joint: f64,
    },

    /// Other numeric failure (overflow, impossible state).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Filesystem failure, annotated with the offending path.
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Convenience constructor for I/O errors carrying their path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_)
            | Error::Ingestion { .. }
            | Error::Invariant { .. }
            | Error::Malformed { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. } => 2,
            Error::NonFiniteLoss { .. } | Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
