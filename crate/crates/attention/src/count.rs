//! Closed-form parameter counts for every attention block, written as
//! arithmetic over the layer shapes. Tests cross-check these against an
//! enumeration of the actually registered tensors.

use crate::config::{AttentionConfig, EmbeddingMode};
use crate::layers::{conv_bn_count, conv_count, linear_count};

/// Parameters of the spatial-attention block for a `(c, h, w)` input.
pub fn rga_s_count(c: usize, h: usize, w: usize, cfg: &AttentionConfig) -> usize {
    let n = h * w;
    branch_count(cfg, c, n)
}

/// Parameters of the channel-attention block for a `(c, h, w)` input.
pub fn rga_c_count(c: usize, h: usize, w: usize, cfg: &AttentionConfig) -> usize {
    let n = h * w;
    branch_count(cfg, n, c)
}

/// Shared core: `d_feat` is the per-node feature width (channels for the
/// spatial branch, positions for the channel branch) and `d_node` the node
/// count.
fn branch_count(cfg: &AttentionConfig, d_feat: usize, d_node: usize) -> usize {
    let mut total = 0;
    if cfg.use_relation && cfg.embedding_mode != EmbeddingMode::None {
        let per_side = conv_bn_count(d_feat, d_feat / cfg.s1, 1);
        total += match cfg.embedding_mode {
            EmbeddingMode::Asymmetric => 2 * per_side,
            EmbeddingMode::Symmetric => per_side,
            EmbeddingMode::None => 0,
        };
    }
    if cfg.use_original {
        total += conv_bn_count(d_feat, d_feat / cfg.s1, 1);
    }
    if cfg.use_relation {
        total += conv_bn_count(2 * d_node, d_node / cfg.s1, 1);
    }
    let orig_width = if cfg.use_original {
        if cfg.use_relation {
            1
        } else {
            d_feat / cfg.s1
        }
    } else {
        0
    };
    let rel_width = if cfg.use_relation { d_node / cfg.s1 } else { 0 };
    let d_in = orig_width + rel_width;
    let mid = cfg.head_hidden(d_in);
    total + conv_bn_count(d_in, mid, 1) + conv_bn_count(mid, 1, 1)
}

/// Parameters of the configured composition for a `(c, h, w)` input.
pub fn compose_count(c: usize, h: usize, w: usize, cfg: &AttentionConfig) -> usize {
    let mut total = 0;
    if cfg.composition.uses_spatial() {
        total += rga_s_count(c, h, w, cfg);
    }
    if cfg.composition.uses_channel() {
        total += rga_c_count(c, h, w, cfg);
    }
    total
}

/// Parameters of the non-local block at width `c`: `2c^2 + 2c`.
pub fn nl_count(c: usize) -> usize {
    let half = (c / 2).max(1);
    3 * conv_count(c, half, 1) + conv_bn_count(half, c, 1)
}

/// Parameters of the simplified non-local block at width `c`.
pub fn snl_count(c: usize) -> usize {
    let half = (c / 2).max(1);
    conv_count(c, 1, 1) + linear_count(c, half) + linear_count(half, c)
}

/// Parameters of squeeze-and-excitation at width `c`, reduction `r`.
pub fn se_count(c: usize, r: usize) -> usize {
    let mid = (c / r).max(1);
    linear_count(c, mid) + linear_count(mid, c)
}

/// Parameters of the CBAM channel branch at width `c`, reduction `r`.
pub fn cbam_c_count(c: usize, r: usize) -> usize {
    se_count(c, r)
}

/// Parameters of the CBAM spatial branch: one 7x7 conv over two channels.
pub fn cbam_s_count() -> usize {
    conv_count(2, 1, 7)
}
