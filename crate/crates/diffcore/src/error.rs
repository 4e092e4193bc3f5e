use thiserror::Error;

/// Failures surfaced by the graph engine and checkpoint IO.
///
/// Shape agreement between ops is a programmer contract and enforced with
/// panics at graph-construction time; these variants cover conditions that
/// depend on runtime values or external files.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("non-finite value produced by `{op}`")]
    NonFiniteValue { op: String },

    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint dtype is {found}, expected {expected}")]
    DtypeMismatch { found: String, expected: String },

    #[error("checkpoint parameter `{name}`: shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, found: Vec<usize>, expected: Vec<usize> },

    #[error("checkpoint parameter set does not match model: {0}")]
    ParamSetMismatch(String),
}
