use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the normalization floor")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index {index} out of range for {len} candidates")]
    BadIndex { index: usize, len: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error("cluster index {index} out of range for K = {k}")]
    BadClusterIndex { index: usize, k: usize },
    #[error("anchor {anchor} has no positive sample in the batch")]
    EmptyPositiveSet { anchor: usize },
    #[error("no failure texts registered for task {0}")]
    MissingFailureTexts(usize),
    #[error("need at least {k} samples to form {k} clusters, got {m}")]
    TooFewSamples { m: usize, k: usize },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("failure archetype {archetype} is not supported for task {task}")]
    ArchetypeUnsupported { task: String, archetype: String },
    #[error("corrupt file {}: {reason}", path.display())]
    CorruptFile { path: PathBuf, reason: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("action horizon {0} is not a positive multiple of the chunk length")]
    BadHorizon(usize),
    #[error("need at least {needed} chunk transitions, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("stratum {stratum} has too few samples: {reason}")]
    InsufficientStratum { stratum: String, reason: String },
    #[error("evaluation set contains only one outcome class")]
    OneClassOnly,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
