use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("actnorm layer {layer} needs data-dependent init before use in training mode")]
    InitRequired { layer: usize },

    #[error("non-finite value produced by flow layer {layer}")]
    NonFiniteFlow { layer: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("unknown class {class} (have {n_classes})")]
    UnknownClass { class: usize, n_classes: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
