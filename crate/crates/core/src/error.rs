use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },

    #[error("payload size mismatch in {path}: expected {expected} bytes, found {found}")]
    PayloadSize { path: PathBuf, expected: usize, found: usize },

    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("non-finite value at voxel (d={}, h={}, w={})", .index[0], .index[1], .index[2])]
    NonFinite { index: [usize; 3] },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid label value {value} for {semantics}")]
    LabelValue { value: u32, semantics: String },

    #[error("no voxel above the body threshold")]
    EmptyBody,

    #[error("mask is empty")]
    EmptyMask,

    #[error("could not place lesion {lesion} after {attempts} attempts")]
    Placement { lesion: usize, attempts: usize },

    #[error("fine label {0} has no tissue group")]
    UnmappedLabel(u32),

    #[error("epoch {ep} outside schedule range [0, {total}]")]
    EpochRange { ep: usize, total: usize },

    #[error("no lesion patches to balance against")]
    NoLesionPatches,

    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("stage precondition failed: {0}")]
    Stage(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
