use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point coincides with the camera center")]
    DegeneratePoint,

    #[error("undistortion did not converge (residual {residual:e})")]
    NonConvergent { residual: f64 },

    #[error("normalized point ({x}, {y}) has no preimage on the viewing sphere")]
    NoPreimage { x: f64, y: f64 },

    #[error("pixel ({u}, {v}) lies outside the {width}x{height} image")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("cell ({x}, {y}) lies outside the {w}x{h} grid")]
    CellOutOfRange { x: usize, y: usize, w: usize, h: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("box placement failed after {attempts} rejections")]
    PlacementFailure { attempts: usize },

    #[error("could not find a collision-free ego path after {attempts} attempts")]
    PathFailure { attempts: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("frames are not in sequential order: {0}")]
    Ordering(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
