//! Toy person re-identification stack: synthetic two-color-body imagery,
//! a small convolutional backbone with optional attention insertion,
//! classification and batch-hard triplet losses, Adam training, and
//! CMC/mAP retrieval evaluation.

mod backbone;
mod dataset;
mod error;
mod eval;
mod losses;
mod optim;
mod sampler;
mod train;

pub use backbone::{
    backbone_forward, features_before_attention, forward_graph, model_param_count, register_model,
    stack_images, BackboneConfig, EmbeddingBatch,
};
pub use dataset::{
    gen_dataset, split_dataset, Sample, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH, JITTER,
    MIN_COLOR_GAP, OCCLUSION_PROB,
};
pub use error::{ReidError, Result};
pub use eval::{cmc_map, EvalReport, CMC_RANKS};
pub use losses::{id_loss_graph, triplet_batch_hard_graph, LABEL_SMOOTHING, TRIPLET_MARGIN};
pub use optim::{Adam, AdamConfig};
pub use sampler::epoch_batches;
pub use train::{train, EpochTrace, TrainConfig};
