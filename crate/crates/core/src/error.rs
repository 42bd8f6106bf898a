use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: String, right: String },

    #[error("annotation {index} at ({x}, {y}, {z}) is outside the {dims} volume")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        z: u32,
        dims: String,
    },

    #[error("annotations {first} and {second} both sit at pixel ({x}, {y})")]
    DuplicatePoint {
        first: usize,
        second: usize,
        x: u32,
        y: u32,
    },

    #[error("annotation set is empty")]
    EmptyAnnotations,

    #[error("k-means with k={k} needs at least {k} voxels, got {voxels}")]
    TooFewVoxels { k: usize, voxels: usize },

    #[error("cell id {id} is out of range ({cells} cells)")]
    InvalidCellId { id: usize, cells: usize },

    #[error("no labeled samples to average over")]
    NoLabeledSamples,

    #[error("no anchor has both a positive and a negative sample")]
    NoValidAnchors,

    #[error("non-finite gradient at coordinate {coord}")]
    NonFiniteGradient { coord: usize },

    #[error("track has no members")]
    EmptyTrack,

    #[error("could not place nucleus {index} after {attempts} attempts; volume too crowded")]
    PlacementFailure { index: usize, attempts: usize },

    #[error("{path}: unsupported format: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("{path}: corrupt file: {detail}")]
    CorruptFile { path: PathBuf, detail: String },

    #[error("{path}:{line}: parse error: {detail}")]
    Parse {
        path: PathBuf,
        line: u64,
        detail: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for bad inputs or parameters,
    /// 2 for I/O and internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::NonFiniteGradient { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
