//! Crate-wide error type with stable machine-parseable codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid depth: {0}")]
    InvalidDepth(String),
    #[error("invalid timestep {0} (expected t in (0,1))")]
    InvalidTimestep(f64),
    #[error("degenerate normal: density gradient magnitude below threshold")]
    DegenerateNormal,
    #[error("degenerate patch: {0}")]
    DegeneratePatch(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("failed to load {path}: {message}")]
    Load { path: String, message: String },
    #[error("diffusion prior unavailable: {0}")]
    PriorUnavailable(String),
    #[error("prior protocol error: {0}")]
    Protocol(String),
    #[error("non-finite gradient encountered at iteration {iteration}: {detail}")]
    NonFiniteGradient { iteration: usize, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable code, used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "E_INVALID_INPUT",
            Error::InvalidDepth(_) => "E_INVALID_DEPTH",
            Error::InvalidTimestep(_) => "E_INVALID_TIMESTEP",
            Error::DegenerateNormal => "E_DEGENERATE_NORMAL",
            Error::DegeneratePatch(_) => "E_DEGENERATE_PATCH",
            Error::EmptyMask => "E_EMPTY_MASK",
            Error::ShapeMismatch(_) => "E_SHAPE_MISMATCH",
            Error::Format { .. } => "E_FORMAT",
            Error::Load { .. } => "E_LOAD",
            Error::PriorUnavailable(_) => "E_PRIOR_UNAVAILABLE",
            Error::Protocol(_) => "E_PROTOCOL",
            Error::NonFiniteGradient { .. } => "E_NONFINITE_GRADIENT",
            Error::Config(_) => "E_CONFIG",
            Error::Io(_) => "E_IO",
        }
    }
}
