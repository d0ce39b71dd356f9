use thiserror::Error;

use crate::reach::UnsafeRegion;
use crate::repair::RepairReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("nnet parse error at line {line}: {msg}")]
    NNetParse { line: usize, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at batch {batch} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("degenerate polytope: {vertices} vertices in dimension {dim}")]
    Degenerate { vertices: usize, dim: usize },

    #[error("explored-set limit of {limit} exceeded; {} unsafe regions found so far", .partial.len())]
    SetLimit {
        limit: usize,
        partial: Vec<UnsafeRegion>,
    },

    #[error("point is not inside the unsafe domain (max slack {slack:e})")]
    NotUnsafe { slack: f64 },

    #[error("property file error: {0}")]
    Property(String),

    /// Repair stopped early; the report covers the iterations that finished.
    #[error("repair aborted in iteration {iteration}: {source}")]
    RepairAborted {
        iteration: usize,
        report: Box<RepairReport>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(expected: usize, got: usize, context: &'static str) -> Self {
        Error::Dimension {
            expected,
            got,
            context,
        }
    }
}
