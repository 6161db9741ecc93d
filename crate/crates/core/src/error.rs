use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requested for a value that is not on the tape")]
    NoForward,

    #[error("loss must hold exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        batch_seed: u64,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
