use thiserror::Error;

/// Errors raised anywhere in the model, training loop or harness.
#[derive(Debug, Error)]
pub enum XfiError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty modality set")]
    EmptyModalitySet,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("objective is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config digest mismatch: checkpoint has {checkpoint}, config has {config}")]
    DigestMismatch { checkpoint: String, config: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, XfiError>;

impl XfiError {
    pub(crate) fn non_finite(op: impl Into<String>) -> Self {
        XfiError::NonFinite { op: op.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        XfiError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
