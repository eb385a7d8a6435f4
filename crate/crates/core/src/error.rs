use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point depth {z} is not in front of the camera")]
    NonPositiveDepth { z: f64 },
    #[error("inverse depth {d} must be positive and finite")]
    NonPositiveInverseDepth { d: f64 },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("sequence length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("temporal window {k} too large for a sequence of {len} frames")]
    WindowTooLarge { k: usize, len: usize },
    #[error("query pixel ({u}, {v}) is outside the {width}x{height} grid")]
    QueryOutOfBounds {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },
    #[error("reduced pose system is singular")]
    SingularSystem,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("inconsistent input: {0}")]
    InputInconsistency(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
