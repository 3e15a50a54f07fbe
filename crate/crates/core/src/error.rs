use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two extents that must agree do not.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("batch norm needs at least 2 samples per channel in training mode, got {0}")]
    DegenerateBatch(usize),

    #[error("CTC alignment infeasible: {frames} frames cannot emit a target needing {required}")]
    InfeasibleAlignment { frames: usize, required: usize },

    #[error("enumeration too large: (classes)^frames = {classes}^{frames} exceeds 1e7")]
    SizeGuard { classes: usize, frames: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("symbol {0:?} is not in the alphabet")]
    UnknownSymbol(char),

    #[error("checkpoint corrupt: {field}: {detail}")]
    Corrupt { field: &'static str, detail: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}
