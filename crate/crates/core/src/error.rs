use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: bad magic bytes, expected {expected:?}")]
    BadMagic { file: String, expected: String },

    #[error("{file}: unsupported version {found}")]
    UnsupportedVersion { file: String, found: u32 },

    #[error("{file}: malformed data: {reason}")]
    Malformed { file: String, reason: String },

    #[error("embedding of segment {segment_id} has norm {norm}, outside tolerance")]
    NormOutOfTolerance { segment_id: String, norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("scene {0} already present in store")]
    DuplicateScene(String),

    #[error("segment id {0} is not unique")]
    DuplicateSegment(String),

    #[error("scene {0} has no segments")]
    EmptyScene(String),

    #[error("unknown scene {0}")]
    UnknownScene(String),

    #[error("no stub rule for query {0:?}")]
    NoRuleForQuery(String),

    #[error("could not parse a JSON array from language model reply: {0:?}")]
    UnparseableLlmReply(String),

    #[error("transport error talking to {endpoint}: {reason}")]
    Transport { endpoint: String, reason: String },

    #[error("nothing to pool: class {0:?} has no tokens and there are no context vectors")]
    NothingToPool(String),

    #[error("non-finite gradient encountered at step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("segment {0} has an empty point range")]
    EmptySegment(String),

    #[error("no ground truth for scene {0}")]
    NoGroundTruth(String),

    #[error("operation not supported: {0}")]
    Unsupported(String),
}

/// Coarse error families, each mapped to a distinct process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    NotFound,
    Io,
    Format,
    Config,
    Backend,
    Training,
    Evaluation,
}

impl ErrorFamily {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::NotFound => 3,
            ErrorFamily::Io => 4,
            ErrorFamily::Format => 5,
            ErrorFamily::Config => 6,
            ErrorFamily::Backend => 7,
            ErrorFamily::Training => 8,
            ErrorFamily::Evaluation => 9,
        }
    }
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            NotFound(_) => ErrorFamily::NotFound,
            Io { .. } => ErrorFamily::Io,
            BadMagic { .. }
            | UnsupportedVersion { .. }
            | Malformed { .. }
            | NormOutOfTolerance { .. }
            | DimMismatch { .. }
            | DuplicateScene(_)
            | DuplicateSegment(_)
            | EmptyScene(_) => ErrorFamily::Format,
            InvalidConfig(_) | Unsupported(_) | NothingToPool(_) => ErrorFamily::Config,
            NoRuleForQuery(_) | UnparseableLlmReply(_) | Transport { .. } => ErrorFamily::Backend,
            NonFiniteGradient { .. } | NonFinite(_) | EmptyTrainingSet => ErrorFamily::Training,
            UnknownScene(_) | EmptySegment(_) | NoGroundTruth(_) => ErrorFamily::Evaluation,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn malformed(file: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            file: file.into(),
            reason: reason.into(),
        }
    }
}
