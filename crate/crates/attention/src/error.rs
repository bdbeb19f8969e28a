use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("attention config: at least one of use_relation / use_original must be enabled")]
    NoFeatures,

    #[error("attention config: reduction ratios must be nonzero")]
    ZeroRatio,

    #[error("{what} ({value}) must be divisible by s1 ({s1})")]
    NotDivisible {
        what: &'static str,
        value: usize,
        s1: usize,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadInput {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("unknown attention module '{0}' (expected one of rga-s, rga-c, rga-sc, rga-cs, rga-par, nl, snl, se, cbam-c, cbam-s)")]
    UnknownModule(String),

    #[error(transparent)]
    Tensor(#[from] rga_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, AttentionError>;
