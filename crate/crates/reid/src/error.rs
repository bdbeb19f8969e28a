use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch of {have} samples is smaller than the required {need}")]
    BatchTooSmall { need: usize, have: usize },

    #[error("dataset has {have} distinct identities, training needs at least {need}")]
    DatasetTooSmall { need: usize, have: usize },

    #[error("triplet loss: no anchor has both a positive and a negative in this batch")]
    NoValidAnchors,

    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("query identity {0} does not appear in the gallery")]
    QueryIdMissing(usize),

    #[error("{op}: expected {expected}, got {got}")]
    BadInput {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error(transparent)]
    Tensor(#[from] rga_tensor::TensorError),

    #[error(transparent)]
    Attention(#[from] rga_attention::AttentionError),
}

pub type Result<T> = std::result::Result<T, ReidError>;
