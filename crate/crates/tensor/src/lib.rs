//! Minimal tensor and reverse-mode differentiation engine for the attention
//! experiments in this workspace. Tensors are dense and row-major; every
//! forward primitive is recorded on a [`Tape`] that can be replayed
//! bit-identically or walked backwards for gradients. Verification paths run
//! at `f64`; training runs at `f32`.

mod error;
mod gradcheck;
mod params;
mod rng;
mod scalar;
mod session;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, jitter_params, CheckReport, GradCheckSettings, ParamCheck};
pub use params::{Param, ParameterSet};
pub use rng::{Stream, StreamRng};
pub use scalar::Scalar;
pub use session::{Mode, Session, BN_EPS, BN_MOMENTUM};
pub use tape::{BnBatchStats, NodeId, Tape};
pub use tensor::Tensor;
