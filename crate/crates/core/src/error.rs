use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dims {0:?}: every dimension must be >= 1 and the element count must fit in memory")]
    InvalidDims([usize; 4]),
    #[error("data length {got} does not match dims {dims:?} (expected {expected})")]
    DataLength {
        dims: [usize; 4],
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite gradient in {0}")]
    NonFinite(String),
    /// 1-based layer position.
    #[error("layer {0} is not a DAU layer")]
    NotDau(usize),
    /// 1-based layer position.
    #[error("layer {0} does not exist")]
    LayerIndex(usize),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: record {record} has label {label}, expected < 10")]
    LabelRange {
        path: PathBuf,
        record: usize,
        label: u8,
    },
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
