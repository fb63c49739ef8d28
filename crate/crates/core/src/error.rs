use alloc::string::String;

/// Errors produced by the simulator core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },

    #[error("parameter manifests do not match")]
    ManifestMismatch,

    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("non-finite gap reported by client {client}")]
    NonFiniteGap { client: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("perturbed decode missing from forward output")]
    MissingPerturbation,

    #[error("client {client} aborted: {reason}")]
    ClientAborted { client: usize, reason: String },

    #[error("paired test needs at least 3 pairs, got {0}")]
    TooFewPairs(usize),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn field(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: impl core::fmt::Debug, found: impl core::fmt::Debug) -> Self {
        Error::Dimension {
            expected: alloc::format!("{expected:?}"),
            found: alloc::format!("{found:?}"),
        }
    }
}
