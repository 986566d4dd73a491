use thiserror::Error;

/// Errors surfaced by the loss, gradient, and geometry routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, below the zero-vector threshold 1e-12")]
    ZeroVector { row: usize, norm: f64 },

    #[error("label {label} at row {row} is out of range for {k} classes")]
    LabelOutOfRange { row: usize, label: usize, k: usize },

    #[error("invalid long-tail spec: {0}")]
    InvalidSpec(String),

    #[error("batch size {requested} exceeds population {available}")]
    BatchTooLarge { requested: usize, available: usize },

    #[error("anchor {anchor} has no positive in the batch")]
    NoPositive { anchor: usize },

    #[error("bound undefined: {0}")]
    Undefined(String),

    #[error("regular simplex with {k} vertices needs ambient dimension >= {} (got {h})", k - 1)]
    DimensionTooSmall { k: usize, h: usize },

    #[error("class {0} has no instances")]
    EmptyClass(usize),

    #[error("theorem 3 bound requires K >= 2 (got {0})")]
    InvalidK(usize),

    #[error("non-finite value encountered at row/coordinate {0}")]
    NonFinite(usize),

    #[error("optimization diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
