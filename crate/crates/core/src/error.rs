use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm in train mode needs a non-empty batch")]
    EmptyBatch,

    #[error("tape corrupted: {0}")]
    Tape(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("network must be in eval mode for {0}")]
    NotEvalMode(&'static str),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("balanced accuracy undefined: class {0} absent from true labels")]
    MissingClass(usize),

    #[error("not enough subjects: {0}")]
    InsufficientSubjects(String),

    #[error("image {index} is not predicted as class {target}; a mask is undefined for it")]
    Misclassified { index: usize, target: usize },

    #[error("mask optimization diverged at epoch {epoch}: loss {loss} exceeds 10x initial {initial}")]
    Divergence { epoch: usize, loss: f64, initial: f64 },

    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },

    // NIfTI
    #[error("bad NIfTI magic {0:?}")]
    NiftiMagic([u8; 4]),
    #[error("bad NIfTI header size field {0}")]
    NiftiHeaderSize(i32),
    #[error("unsupported NIfTI datatype code {0}")]
    NiftiDatatype(i16),
    #[error("unsupported NIfTI dimensions: {0}")]
    NiftiDims(String),
    #[error("truncated NIfTI data: expected {expected} bytes, found {found}")]
    NiftiTruncated { expected: usize, found: usize },

    // checkpoint
    #[error("bad checkpoint magic")]
    CheckpointMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CheckpointChecksum { stored: u32, computed: u32 },
    #[error("checkpoint content invalid: {0}")]
    CheckpointFormat(String),

    // manifest
    #[error("manifest row {row}: unknown label {label:?}")]
    UnknownLabel { row: usize, label: String },
    #[error("manifest missing column {0:?}")]
    MissingColumn(String),
    #[error("manifest row {row}: duplicate (participant, session) = ({participant}, {session})")]
    DuplicateSession { row: usize, participant: String, session: String },
    #[error("manifest row {row}: {detail}")]
    ManifestRow { row: usize, detail: String },

    #[error("synthetic cohort geometry: {0}")]
    Geometry(String),

    #[error("slice index {index} out of range for axis extent {extent}")]
    SliceOutOfRange { index: usize, extent: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
