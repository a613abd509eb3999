use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at {what}: {message}")]
    Parse {
        path: PathBuf,
        what: String,
        message: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("token id {token} at position {position} exceeds vocab size {vocab_size}")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab_size: u32,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid probability table: {0}")]
    InvalidDistribution(String),

    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),

    #[error("corpus too short: {len} tokens for order {order}")]
    CorpusTooShort { len: usize, order: usize },

    #[error("vocab mismatch: expected {expected}, got {got} ({context})")]
    VocabMismatch {
        expected: u32,
        got: u32,
        context: String,
    },

    #[error("inconsistent expert lists across caches: {0}")]
    InconsistentExperts(String),

    #[error("corrupt probability cache: {0}")]
    CorruptCache(String),

    #[error("unknown domain {0}")]
    UnknownDomain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular kernel matrix ({0}); raise the noise floor to make it invertible")]
    SingularKernel(String),

    #[error("power-law undefined at zero weight for domain {0}")]
    ZeroWeightPowerLaw(String),

    #[error("rank correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid config at `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("artifact mismatch: {0} (re-run the upstream stage or pass --force)")]
    ArtifactMismatch(String),

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            what: what.into(),
            message: message.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad configuration or unreadable inputs,
    /// as opposed to internal numerical failures.
    pub fn is_config_or_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::InvalidConfig { .. }
                | Error::ArtifactMismatch(_)
                | Error::UnknownDomain(_)
        )
    }
}
