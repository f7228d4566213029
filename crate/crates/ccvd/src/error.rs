//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {site}: expected {expected}, got {got}")]
    ShapeMismatch {
        site: String,
        expected: String,
        got: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("timestep {t} out of range for schedule with {len} steps")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("non-finite values at step {step} (max magnitude {max_abs:e})")]
    NonFinite { step: usize, max_abs: f64 },

    #[error("unregistered concept token `{0}`")]
    UnknownConceptToken(String),

    #[error("unknown placeholder `{0}` in prompt")]
    UnknownPlaceholder(String),

    #[error("concept name `{0}` already registered")]
    DuplicateConcept(String),

    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),

    #[error("prompt has {got} tokens, exceeds limit {limit}")]
    PromptTooLong { got: usize, limit: usize },

    #[error("region {index}: {reason}")]
    InvalidRegion { index: usize, reason: String },

    #[error("training diverged at step {step} (loss {loss:e})")]
    Diverged { step: usize, loss: f64 },

    #[error("empty registry: {0}")]
    EmptyRegistry(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(site: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            site: site.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
