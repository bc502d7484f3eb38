use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate anchors: {0}")]
    DegenerateAnchors(&'static str),

    #[error("under-constrained problem: {effective} effective residuals, need at least 6")]
    UnderConstrained { effective: usize },

    #[error("normal equations stayed singular after {retries} damping increases")]
    SingularNormalEquations { retries: usize },

    #[error("malformed scan file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("point {index} lacks a full neighbor window")]
    InsufficientNeighbors { index: usize },

    #[error("k-d tree is empty")]
    EmptyTree,

    #[error("trajectories share no associated poses")]
    NoOverlap,

    #[error("insufficient features: {0}")]
    InsufficientFeatures(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
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
}
