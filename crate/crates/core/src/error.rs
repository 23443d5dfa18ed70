use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("insufficient data: {found} valid points, at least {required} required")]
    InsufficientData { found: usize, required: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("Gram matrix is not positive definite; increase the noise floor ({0})")]
    IllConditioned(String),

    #[error("degenerate rotation: contact set has rank {rank} < 2, rotation about the contact line is unconstrained")]
    DegenerateRotation { rank: usize },

    #[error("undefined contact margin: zero contact force")]
    UndefinedMargin,

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
