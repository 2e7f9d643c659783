//! One error type for the whole crate.
//!
//! Variants map onto how the CLI exits: anything stemming from bad input
//! (missing files, malformed records, unknown languages, config mistakes)
//! is distinguishable from internal failures like divergence.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown language code {0:?}")]
    UnknownLanguage(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at step {step}: loss {loss}, lr {lr}, grad norm {grad_norm}")]
    Diverged {
        step: u64,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by what the caller handed in, as opposed to
    /// something going wrong mid-computation. The CLI exits 2 on these.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidInput(_)
                | Error::Parse { .. }
                | Error::UnknownLanguage(_)
                | Error::SchemaMismatch(_)
                | Error::Io { .. }
        )
    }
}
