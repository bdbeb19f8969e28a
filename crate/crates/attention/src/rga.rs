//! Relation-aware global attention. Pairwise affinities between nodes
//! (spatial positions or channels) are stacked into per-node relation
//! vectors, embedded, and combined with the pooled original feature to
//! produce a sigmoid gate per node.

use rga_tensor::{Mode, NodeId, ParameterSet, Scalar, Session, StreamRng, Tensor};

use crate::config::{require_divisible, AttentionConfig, Composition, EmbeddingMode};
use crate::error::{AttentionError, Result};
use crate::layers::{conv_bn, conv_bn_relu, register_conv_bn};

fn shape4(sess: &Session<impl Scalar>, x: NodeId, op: &'static str) -> Result<[usize; 4]> {
    let s = sess.tape.value(x).shape();
    if s.len() != 4 {
        return Err(AttentionError::BadInput {
            op,
            expected: "rank-4 feature map (B, C, H, W)".into(),
            got: s.to_vec(),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

// ---- registration ----

/// Registers the spatial-attention parameters for a `(c, h, w)` input under
/// `<prefix>.{theta,phi,psi,rel,head1,head2}`.
pub fn register_rga_s<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c: usize,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
) -> Result<()> {
    cfg.validate()?;
    let n = h * w;
    let embeds_features = cfg.use_original || (cfg.use_relation && cfg.embedding_mode != EmbeddingMode::None);
    if embeds_features {
        require_divisible("spatial branch channel width", c, cfg.s1)?;
    }
    if cfg.use_relation {
        require_divisible("spatial position count", n, cfg.s1)?;
    }
    if cfg.use_relation && cfg.embedding_mode != EmbeddingMode::None {
        register_conv_bn(ps, rng, &format!("{prefix}.theta"), c, c / cfg.s1, 1)?;
        if cfg.embedding_mode == EmbeddingMode::Asymmetric {
            register_conv_bn(ps, rng, &format!("{prefix}.phi"), c, c / cfg.s1, 1)?;
        }
    }
    if cfg.use_original {
        register_conv_bn(ps, rng, &format!("{prefix}.psi"), c, c / cfg.s1, 1)?;
    }
    if cfg.use_relation {
        register_conv_bn(ps, rng, &format!("{prefix}.rel"), 2 * n, n / cfg.s1, 1)?;
    }
    let rel_width = if cfg.use_relation { n / cfg.s1 } else { 0 };
    let d_in = gate_input_channels(cfg, c / cfg.s1, rel_width);
    register_head(ps, rng, prefix, d_in, cfg)
}

/// Registers the channel-attention parameters for a `(c, h, w)` input.
/// Channels are the nodes; the flattened `h*w` axis is the feature width.
pub fn register_rga_c<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c: usize,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
) -> Result<()> {
    cfg.validate()?;
    let n = h * w;
    let embeds_features = cfg.use_original || (cfg.use_relation && cfg.embedding_mode != EmbeddingMode::None);
    if embeds_features {
        require_divisible("channel branch spatial extent", n, cfg.s1)?;
    }
    if cfg.use_relation {
        require_divisible("channel count", c, cfg.s1)?;
    }
    if cfg.use_relation && cfg.embedding_mode != EmbeddingMode::None {
        register_conv_bn(ps, rng, &format!("{prefix}.theta"), n, n / cfg.s1, 1)?;
        if cfg.embedding_mode == EmbeddingMode::Asymmetric {
            register_conv_bn(ps, rng, &format!("{prefix}.phi"), n, n / cfg.s1, 1)?;
        }
    }
    if cfg.use_original {
        register_conv_bn(ps, rng, &format!("{prefix}.psi"), n, n / cfg.s1, 1)?;
    }
    if cfg.use_relation {
        register_conv_bn(ps, rng, &format!("{prefix}.rel"), 2 * c, c / cfg.s1, 1)?;
    }
    let rel_width = if cfg.use_relation { c / cfg.s1 } else { 0 };
    let d_in = gate_input_channels(cfg, n / cfg.s1, rel_width);
    register_head(ps, rng, prefix, d_in, cfg)
}

/// Channels entering the gating head: pooled-or-full original feature plus
/// the embedded relation vector.
fn gate_input_channels(cfg: &AttentionConfig, psi_width: usize, rel_width: usize) -> usize {
    let orig = if cfg.use_original {
        if cfg.use_relation {
            1
        } else {
            psi_width
        }
    } else {
        0
    };
    let rel = if cfg.use_relation { rel_width } else { 0 };
    orig + rel
}

fn register_head<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    d_in: usize,
    cfg: &AttentionConfig,
) -> Result<()> {
    let mid = cfg.head_hidden(d_in);
    register_conv_bn(ps, rng, &format!("{prefix}.head1"), d_in, mid, 1)?;
    register_conv_bn(ps, rng, &format!("{prefix}.head2"), mid, 1, 1)?;
    Ok(())
}

/// Registers the configured composition under `<prefix>.spatial` /
/// `<prefix>.channel`.
pub fn register_compose<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c: usize,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
) -> Result<()> {
    if cfg.composition.uses_spatial() {
        register_rga_s(ps, rng, &format!("{prefix}.spatial"), c, h, w, cfg)?;
    }
    if cfg.composition.uses_channel() {
        register_rga_c(ps, rng, &format!("{prefix}.channel"), c, h, w, cfg)?;
    }
    Ok(())
}

// ---- graph builders ----

/// Pairwise affinity between spatial positions: `(B, N, N)` with
/// `R[b][i][j] = theta(x_i) . phi(x_j)`.
pub fn spatial_affinity_node<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    let [b, c, h, w] = shape4(sess, x, "spatial_affinity")?;
    let n = h * w;
    let (th, ph) = match cfg.embedding_mode {
        EmbeddingMode::None => {
            let e = sess.tape.reshape(x, &[b, c, n])?;
            (e, e)
        }
        EmbeddingMode::Symmetric => {
            let t = conv_bn_relu(sess, ps, &format!("{prefix}.theta"), x, 1, 0)?;
            let t = sess.tape.reshape(t, &[b, c / cfg.s1, n])?;
            (t, t)
        }
        EmbeddingMode::Asymmetric => {
            let t = conv_bn_relu(sess, ps, &format!("{prefix}.theta"), x, 1, 0)?;
            let p = conv_bn_relu(sess, ps, &format!("{prefix}.phi"), x, 1, 0)?;
            (
                sess.tape.reshape(t, &[b, c / cfg.s1, n])?,
                sess.tape.reshape(p, &[b, c / cfg.s1, n])?,
            )
        }
    };
    let tht = sess.tape.permute(th, &[0, 2, 1])?;
    Ok(sess.tape.batch_matmul(tht, ph)?)
}

/// Pairwise affinity between channels: `(B, C, C)` over flattened spatial
/// feature vectors.
pub fn channel_affinity_node<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    let [b, c, h, w] = shape4(sess, x, "channel_affinity")?;
    let n = h * w;
    let xn = to_channel_nodes(sess, x)?;
    let (th, ph) = match cfg.embedding_mode {
        EmbeddingMode::None => {
            let e = sess.tape.reshape(xn, &[b, n, c])?;
            (e, e)
        }
        EmbeddingMode::Symmetric => {
            let t = conv_bn_relu(sess, ps, &format!("{prefix}.theta"), xn, 1, 0)?;
            let t = sess.tape.reshape(t, &[b, n / cfg.s1, c])?;
            (t, t)
        }
        EmbeddingMode::Asymmetric => {
            let t = conv_bn_relu(sess, ps, &format!("{prefix}.theta"), xn, 1, 0)?;
            let p = conv_bn_relu(sess, ps, &format!("{prefix}.phi"), xn, 1, 0)?;
            (
                sess.tape.reshape(t, &[b, n / cfg.s1, c])?,
                sess.tape.reshape(p, &[b, n / cfg.s1, c])?,
            )
        }
    };
    let tht = sess.tape.permute(th, &[0, 2, 1])?;
    Ok(sess.tape.batch_matmul(tht, ph)?)
}

/// Reinterprets `(B, C, H, W)` as channel nodes: `(B, H*W, C, 1)` with the
/// spatial positions raster-scanned into the feature axis.
fn to_channel_nodes<T: Scalar>(sess: &mut Session<T>, x: NodeId) -> Result<NodeId> {
    let [b, c, h, w] = shape4(sess, x, "to_channel_nodes")?;
    let n = h * w;
    let flat = sess.tape.reshape(x, &[b, c, n])?;
    let swapped = sess.tape.permute(flat, &[0, 2, 1])?;
    Ok(sess.tape.reshape(swapped, &[b, n, c, 1])?)
}

/// Stacks each node's affinity row and column into its channel vector:
/// node `i` carries `[R(i, :), R(:, i)]`, laid out as a `(B, 2N, h, w)` map.
pub fn relation_stack_node<T: Scalar>(
    sess: &mut Session<T>,
    r: NodeId,
    h: usize,
    w: usize,
) -> Result<NodeId> {
    let s = sess.tape.value(r).shape().to_vec();
    if s.len() != 3 || s[1] != s[2] || s[1] != h * w {
        return Err(AttentionError::BadInput {
            op: "relation_stack",
            expected: format!("square affinity (B, {n}, {n})", n = h * w),
            got: s,
        });
    }
    let (b, n) = (s[0], s[1]);
    // Channel k at node i is R[i][k] for k < n (the row) and R[k-n][i]
    // for k >= n (the column).
    let rows = sess.tape.permute(r, &[0, 2, 1])?;
    let both = sess.tape.concat(&[rows, r], 1)?;
    Ok(sess.tape.reshape(both, &[b, 2 * n, h, w])?)
}

/// Spatial attention gate in `(0, 1)`: `(B, 1, H, W)`.
pub fn rga_s_gate<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let [b, _c, h, w] = shape4(sess, x, "rga_s")?;
    let n = h * w;
    let mut parts = Vec::new();
    if cfg.use_original {
        let psi = conv_bn_relu(sess, ps, &format!("{prefix}.psi"), x, 1, 0)?;
        if cfg.use_relation {
            let pooled = sess.tape.mean_axis(psi, 1)?;
            parts.push(sess.tape.reshape(pooled, &[b, 1, h, w])?);
        } else {
            parts.push(psi);
        }
    }
    if cfg.use_relation {
        let r = spatial_affinity_node(sess, ps, prefix, x, cfg)?;
        let stack = relation_stack_node(sess, r, h, w)?;
        let rel = conv_bn_relu(sess, ps, &format!("{prefix}.rel"), stack, 1, 0)?;
        debug_assert_eq!(sess.tape.value(rel).shape()[1], n / cfg.s1);
        parts.push(rel);
    }
    let y = sess.tape.concat(&parts, 1)?;
    gate_head(sess, ps, prefix, y)
}

/// Channel attention gate in `(0, 1)`: `(B, C, 1, 1)`.
pub fn rga_c_gate<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let [b, c, _h, _w] = shape4(sess, x, "rga_c")?;
    let xn = to_channel_nodes(sess, x)?;
    let mut parts = Vec::new();
    if cfg.use_original {
        let psi = conv_bn_relu(sess, ps, &format!("{prefix}.psi"), xn, 1, 0)?;
        if cfg.use_relation {
            let pooled = sess.tape.mean_axis(psi, 1)?;
            parts.push(sess.tape.reshape(pooled, &[b, 1, c, 1])?);
        } else {
            parts.push(psi);
        }
    }
    if cfg.use_relation {
        let r = channel_affinity_node(sess, ps, prefix, x, cfg)?;
        let stack = relation_stack_node(sess, r, c, 1)?;
        let rel = conv_bn_relu(sess, ps, &format!("{prefix}.rel"), stack, 1, 0)?;
        parts.push(rel);
    }
    let y = sess.tape.concat(&parts, 1)?;
    let gate = gate_head(sess, ps, prefix, y)?;
    Ok(sess.tape.reshape(gate, &[b, c, 1, 1])?)
}

/// Two-layer head: 1x1 conv + BN + relu, 1x1 conv + BN, sigmoid.
fn gate_head<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    y: NodeId,
) -> Result<NodeId> {
    let h1 = conv_bn_relu(sess, ps, &format!("{prefix}.head1"), y, 1, 0)?;
    let h2 = conv_bn(sess, ps, &format!("{prefix}.head2"), h1, 1, 0)?;
    Ok(sess.tape.sigmoid(h2)?)
}

/// Multiplies features by a spatial gate `(B, 1, H, W)`.
pub fn apply_spatial_gate<T: Scalar>(
    sess: &mut Session<T>,
    x: NodeId,
    gate: NodeId,
) -> Result<NodeId> {
    let [_b, c, _h, _w] = shape4(sess, x, "apply_spatial_gate")?;
    let g = sess.tape.broadcast_axis(gate, 1, c)?;
    Ok(sess.tape.mul(x, g)?)
}

/// Multiplies features by a channel gate `(B, C, 1, 1)`.
pub fn apply_channel_gate<T: Scalar>(
    sess: &mut Session<T>,
    x: NodeId,
    gate: NodeId,
) -> Result<NodeId> {
    let [_b, _c, h, w] = shape4(sess, x, "apply_channel_gate")?;
    let g = sess.tape.broadcast_axis(gate, 2, h)?;
    let g = sess.tape.broadcast_axis(g, 3, w)?;
    Ok(sess.tape.mul(x, g)?)
}

/// Runs the configured composition of spatial and channel attention over a
/// feature map, returning the gated features.
pub fn compose<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    let spatial = format!("{prefix}.spatial");
    let channel = format!("{prefix}.channel");
    match cfg.composition {
        Composition::Spatial => {
            let g = rga_s_gate(sess, ps, &spatial, x, cfg)?;
            apply_spatial_gate(sess, x, g)
        }
        Composition::Channel => {
            let g = rga_c_gate(sess, ps, &channel, x, cfg)?;
            apply_channel_gate(sess, x, g)
        }
        Composition::SpatialChannel => {
            let gs = rga_s_gate(sess, ps, &spatial, x, cfg)?;
            let y = apply_spatial_gate(sess, x, gs)?;
            let gc = rga_c_gate(sess, ps, &channel, y, cfg)?;
            apply_channel_gate(sess, y, gc)
        }
        Composition::ChannelSpatial => {
            let gc = rga_c_gate(sess, ps, &channel, x, cfg)?;
            let y = apply_channel_gate(sess, x, gc)?;
            let gs = rga_s_gate(sess, ps, &spatial, y, cfg)?;
            apply_spatial_gate(sess, y, gs)
        }
        Composition::Parallel => {
            let gs = rga_s_gate(sess, ps, &spatial, x, cfg)?;
            let gc = rga_c_gate(sess, ps, &channel, x, cfg)?;
            let y = apply_spatial_gate(sess, x, gs)?;
            apply_channel_gate(sess, y, gc)
        }
    }
}

// ---- single-image conveniences (eval mode) ----

fn single_image_session<T: Scalar>(x: &Tensor<T>) -> Result<(Session<T>, NodeId)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(AttentionError::BadInput {
            op: "single_image",
            expected: "rank-3 feature map (C, H, W)".into(),
            got: s.to_vec(),
        });
    }
    let mut sess = Session::new(Mode::Eval);
    let batched = Tensor::new(&[1, s[0], s[1], s[2]], x.data().to_vec()).expect("same numel");
    let id = sess.input(batched);
    Ok((sess, id))
}

/// Affinity matrix `(N, N)` for one `(C, H, W)` image.
pub fn spatial_affinity<T: Scalar>(
    ps: &ParameterSet<T>,
    prefix: &str,
    x: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let (mut sess, id) = single_image_session(x)?;
    let r = spatial_affinity_node(&mut sess, ps, prefix, id, cfg)?;
    let v = sess.tape.value(r);
    let n = v.shape()[1];
    Ok(Tensor::new(&[n, n], v.data().to_vec()).expect("same numel"))
}

/// Affinity matrix `(C, C)` for one `(C, H, W)` image.
pub fn channel_affinity<T: Scalar>(
    ps: &ParameterSet<T>,
    prefix: &str,
    x: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let (mut sess, id) = single_image_session(x)?;
    let r = channel_affinity_node(&mut sess, ps, prefix, id, cfg)?;
    let v = sess.tape.value(r);
    let c = v.shape()[1];
    Ok(Tensor::new(&[c, c], v.data().to_vec()).expect("same numel"))
}

/// Spatial attention map `(H, W)` for one `(C, H, W)` image.
pub fn rga_s_map<T: Scalar>(
    ps: &ParameterSet<T>,
    prefix: &str,
    x: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (mut sess, id) = single_image_session(x)?;
    let g = rga_s_gate(&mut sess, ps, prefix, id, cfg)?;
    Ok(Tensor::new(&[h, w], sess.tape.value(g).data().to_vec()).expect("same numel"))
}

/// Channel attention vector `(C)` for one `(C, H, W)` image.
pub fn rga_c_map<T: Scalar>(
    ps: &ParameterSet<T>,
    prefix: &str,
    x: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let c = x.shape()[0];
    let (mut sess, id) = single_image_session(x)?;
    let g = rga_c_gate(&mut sess, ps, prefix, id, cfg)?;
    Ok(Tensor::new(&[c], sess.tape.value(g).data().to_vec()).expect("same numel"))
}

/// Relation stacking as a plain tensor transform: `(N, N)` affinity to
/// `(2N, H, W)` per-node relation channels.
pub fn relation_stack<T: Scalar>(r: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = r.shape();
    let n = h * w;
    if s.len() != 2 || s[0] != n || s[1] != n {
        return Err(AttentionError::BadInput {
            op: "relation_stack",
            expected: format!("square affinity ({n}, {n})"),
            got: s.to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[2 * n, h, w]);
    for k in 0..2 * n {
        for i in 0..n {
            let v = if k < n { r.data()[i * n + k] } else { r.data()[(k - n) * n + i] };
            out.data_mut()[k * n + i] = v;
        }
    }
    Ok(out)
}

/// Gates one `(C, H, W)` image by a spatial map `(H, W)`.
pub fn apply_attention_spatial<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || a.shape() != [s[1], s[2]] {
        return Err(AttentionError::BadInput {
            op: "apply_attention",
            expected: format!("map ({}, {}) for features {:?}", s[1], s[2], s),
            got: a.shape().to_vec(),
        });
    }
    let n = s[1] * s[2];
    let mut out = x.clone();
    for c in 0..s[0] {
        for i in 0..n {
            let v = out.data()[c * n + i] * a.data()[i];
            out.data_mut()[c * n + i] = v;
        }
    }
    Ok(out)
}

/// Gates one `(C, H, W)` image by a channel vector `(C)`.
pub fn apply_attention_channel<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || a.shape() != [s[0]] {
        return Err(AttentionError::BadInput {
            op: "apply_attention",
            expected: format!("vector ({}) for features {:?}", s[0], s),
            got: a.shape().to_vec(),
        });
    }
    let n = s[1] * s[2];
    let mut out = x.clone();
    for c in 0..s[0] {
        for i in 0..n {
            let v = out.data()[c * n + i] * a.data()[c];
            out.data_mut()[c * n + i] = v;
        }
    }
    Ok(out)
}
