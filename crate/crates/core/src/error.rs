use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the refinement, loss and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("logarithm is ambiguous for rotation angle {angle} rad")]
    AmbiguousLogarithm { angle: f64 },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid depth {0}")]
    InvalidDepth(f64),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),

    #[error("damped hessian is not positive definite")]
    SingularHessian,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("rank-deficient geometry: {0}")]
    RankDeficient(String),

    #[error("insufficient trajectory length: {0}")]
    InsufficientLength(String),

    #[error("{}: {source}", path.display())]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
