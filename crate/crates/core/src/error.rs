use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid model spec: {0}")]
    InvalidModel(String),
    #[error("invalid prompt spec: {0}")]
    InvalidPrompt(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("missing data file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: expected {expected} bytes, found {found}", path.display())]
    FileSize {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("{}: label {label} out of range at record {record}", path.display())]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error("dataset images are not normalized")]
    NotNormalized,
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error("partition retry budget exhausted after {0} attempts")]
    RetriesExhausted(usize),
    #[error("empty shard: {0}")]
    EmptyShard(String),
    #[error("unsupported algorithm: {0}")]
    UnsupportedAlgorithm(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
