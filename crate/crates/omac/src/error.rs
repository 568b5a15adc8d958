use thiserror::Error;

pub type Result<T> = std::result::Result<T, OmacError>;

#[derive(Error, Debug)]
pub enum OmacError {
    /// Invalid user-supplied configuration or flag value.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("agent {agent} action {action} is masked in state {state}")]
    MaskedAction {
        agent: usize,
        action: usize,
        state: u64,
    },

    #[error("enumeration too large: {size} state-action pairs exceeds cap {cap}")]
    EnumerationTooLarge { size: usize, cap: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dataset fingerprint {found} does not match environment fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("non-finite gradient at coordinate {index}: {value}")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
