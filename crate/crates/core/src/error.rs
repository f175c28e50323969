use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the recognizer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this trace")]
    ForeignVar,

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("infeasible CTC target{branch}: {frames} frames cannot emit {required} required symbols")]
    InfeasibleTarget {
        branch: String,
        frames: usize,
        required: usize,
    },

    #[error("invalid CTC target: {0}")]
    InvalidTarget(String),

    #[error("CTC oracle guard exceeded: {paths} paths (limit {limit})")]
    OracleGuard { paths: f64, limit: f64 },

    #[error("feature file: bad magic {0:?}")]
    FeatureMagic([u8; 4]),

    #[error("feature file: unsupported version {0}")]
    FeatureVersion(u32),

    #[error("feature file: unknown modality id {0}")]
    FeatureModality(u8),

    #[error("feature file truncated: expected {expected} bytes, found {found}")]
    FeatureTruncated { expected: usize, found: usize },

    #[error("feature dimension {found} does not match configured dimension {expected}")]
    FeatureDim { expected: usize, found: usize },

    #[error("checkpoint: bad magic {0:?}")]
    CheckpointMagic([u8; 4]),

    #[error("checkpoint: unsupported version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    CheckpointChecksum { stored: u64, computed: u64 },

    #[error("checkpoint contains unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),

    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParamDim {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("empty reference in sample `{0}`")]
    EmptyReference(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest {path}:{line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
