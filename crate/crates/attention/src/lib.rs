//! Attention blocks for convolutional feature maps: relation-aware global
//! attention over spatial positions and channels, their compositions, and
//! the usual comparison blocks (non-local, simplified non-local,
//! squeeze-and-excitation, CBAM branches).
//!
//! Every block is expressed as a graph over [`rga_tensor`] primitives, so
//! gradients come from the shared tape and each block can be checked
//! against finite differences end to end.

mod baselines;
mod config;
mod count;
mod error;
mod layers;
mod module;
mod rga;

pub use baselines::{
    cbam_c_forward, cbam_c_gate, cbam_s_forward, cbam_s_gate, nl_forward, register_cbam_c,
    register_cbam_s, register_nl, register_se, register_snl, se_forward, se_gate, snl_forward,
    snl_mask, snl_mask_map,
};
pub use config::{AttentionConfig, Composition, EmbeddingMode};
pub use count::{
    cbam_c_count, cbam_s_count, compose_count, nl_count, rga_c_count, rga_s_count, se_count,
    snl_count,
};
pub use error::{AttentionError, Result};
pub use layers::{
    conv, conv_bn, conv_bn_count, conv_bn_relu, conv_count, linear, linear_count, register_conv,
    register_conv_bn, register_linear, uniform_init,
};
pub use module::{ModuleKind, SE_REDUCTION};
pub use rga::{
    apply_attention_channel, apply_attention_spatial, apply_channel_gate, apply_spatial_gate,
    channel_affinity, channel_affinity_node, compose, register_compose, register_rga_c,
    register_rga_s, relation_stack, relation_stack_node, rga_c_gate, rga_c_map, rga_s_gate,
    rga_s_map, spatial_affinity, spatial_affinity_node,
};
