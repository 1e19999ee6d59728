use thiserror::Error;

/// Crate-wide error type. Each variant is one failure class; the class name
/// is stable and machine-parseable via [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The teacher-call ledger is full; no further forward passes are allowed.
    #[error("teacher budget exhausted: {used} of {limit} calls used, cannot query sample {sample_id}")]
    BudgetExhausted {
        used: u64,
        limit: u64,
        sample_id: u64,
    },

    /// A hint was requested from an oracle created without white-box access.
    #[error("hint unavailable: oracle was created without white-box access (sample {sample_id})")]
    HintUnavailable { sample_id: u64 },

    #[error("cache corrupt: {0}")]
    CacheCorrupt(String),

    /// Cache fingerprint does not match the loaded teacher's weights.
    #[error("teacher mismatch: cache fingerprint {cache:#018x} != teacher fingerprint {teacher:#018x} (pass an override to accept)")]
    TeacherMismatch { cache: u64, teacher: u64 },

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("enumeration too large: {total} groups exceeds limit {limit}")]
    TooLarge { total: u128, limit: u128 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable one-word class name, used by the CLI for machine-parseable
    /// error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::BudgetExhausted { .. } => "BudgetExhausted",
            Error::HintUnavailable { .. } => "HintUnavailable",
            Error::CacheCorrupt(_) => "CacheCorrupt",
            Error::TeacherMismatch { .. } => "TeacherMismatch",
            Error::NumericalDivergence(_) => "NumericalDivergence",
            Error::TooLarge { .. } => "TooLarge",
            Error::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
