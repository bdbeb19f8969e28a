//! Comparison attention blocks: the non-local block and its simplified
//! variant, squeeze-and-excitation, and the two CBAM branches. Each has a
//! `register_*` for parameters and a `*_forward` graph builder that maps
//! `(B, C, H, W)` features to gated features of the same shape.

use rga_tensor::{Mode, NodeId, ParameterSet, Scalar, Session, StreamRng, Tensor};

use crate::error::{AttentionError, Result};
use crate::layers::{
    conv, conv_bn, linear, register_conv, register_conv_bn, register_linear,
};
use crate::rga::{apply_channel_gate, apply_spatial_gate};

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

/// Mean over the spatial extent: `(B, C, H, W)` to `(B, C)`.
fn global_avg_pool<T: Scalar>(sess: &mut Session<T>, x: NodeId) -> Result<NodeId> {
    let [b, c, h, w] = shape4(sess, x, "global_avg_pool")?;
    let flat = sess.tape.reshape(x, &[b, c, h * w])?;
    Ok(sess.tape.mean_axis(flat, 2)?)
}

/// Max over the spatial extent: `(B, C, H, W)` to `(B, C)`.
fn global_max_pool<T: Scalar>(sess: &mut Session<T>, x: NodeId) -> Result<NodeId> {
    let [b, c, h, w] = shape4(sess, x, "global_max_pool")?;
    let flat = sess.tape.reshape(x, &[b, c, h * w])?;
    Ok(sess.tape.max_axis(flat, 2)?)
}

// ---- non-local block ----

/// Non-local block parameters: three half-width 1x1 projections and a
/// BN-backed output projection, under `<prefix>.{theta,phi,g,wz}`.
pub fn register_nl<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    let half = (c / 2).max(1);
    register_conv(ps, rng, &format!("{prefix}.theta"), c, half, 1)?;
    register_conv(ps, rng, &format!("{prefix}.phi"), c, half, 1)?;
    register_conv(ps, rng, &format!("{prefix}.g"), c, half, 1)?;
    register_conv_bn(ps, rng, &format!("{prefix}.wz"), half, c, 1)?;
    Ok(())
}

/// Non-local block: softmax-normalised pairwise attention aggregates value
/// projections, and the result is projected back and added residually.
pub fn nl_forward<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let [b, c, h, w] = shape4(sess, x, "nl")?;
    let (half, n) = ((c / 2).max(1), h * w);
    let th = conv(sess, ps, &format!("{prefix}.theta"), x, 1, 0)?;
    let ph = conv(sess, ps, &format!("{prefix}.phi"), x, 1, 0)?;
    let gx = conv(sess, ps, &format!("{prefix}.g"), x, 1, 0)?;
    let th = sess.tape.reshape(th, &[b, half, n])?;
    let ph = sess.tape.reshape(ph, &[b, half, n])?;
    let gx = sess.tape.reshape(gx, &[b, half, n])?;
    let tht = sess.tape.permute(th, &[0, 2, 1])?;
    let logits = sess.tape.batch_matmul(tht, ph)?;
    let attn = sess.tape.row_softmax(logits)?;
    let gxt = sess.tape.permute(gx, &[0, 2, 1])?;
    let y = sess.tape.batch_matmul(attn, gxt)?;
    let y = sess.tape.permute(y, &[0, 2, 1])?;
    let y = sess.tape.reshape(y, &[b, half, h, w])?;
    let z = conv_bn(sess, ps, &format!("{prefix}.wz"), y, 1, 0)?;
    Ok(sess.tape.add(x, z)?)
}

// ---- simplified non-local block ----

/// Simplified non-local parameters: a one-channel mask conv and a two-layer
/// bottleneck transform, under `<prefix>.{mask,fc1,fc2}`.
pub fn register_snl<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    let half = (c / 2).max(1);
    register_conv(ps, rng, &format!("{prefix}.mask"), c, 1, 1)?;
    register_linear(ps, rng, &format!("{prefix}.fc1"), c, half)?;
    register_linear(ps, rng, &format!("{prefix}.fc2"), half, c)?;
    Ok(())
}

/// Softmax mask over positions for the simplified non-local block:
/// `(B, 1, N)`, rows summing to 1.
pub fn snl_mask<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let [b, _c, h, w] = shape4(sess, x, "snl")?;
    let m = conv(sess, ps, &format!("{prefix}.mask"), x, 1, 0)?;
    let m = sess.tape.reshape(m, &[b, 1, h * w])?;
    Ok(sess.tape.row_softmax(m)?)
}

/// Simplified non-local block: one shared softmax mask pools a global
/// context vector, which is transformed and added to every position. The
/// update is by construction identical across positions.
pub fn snl_forward<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let [b, c, h, w] = shape4(sess, x, "snl")?;
    let n = h * w;
    let mask = snl_mask(sess, ps, prefix, x)?;
    let xf = sess.tape.reshape(x, &[b, c, n])?;
    let maskt = sess.tape.permute(mask, &[0, 2, 1])?;
    let ctx = sess.tape.batch_matmul(xf, maskt)?;
    let ctx = sess.tape.reshape(ctx, &[b, c])?;
    let t = linear(sess, ps, &format!("{prefix}.fc1"), ctx)?;
    let t = sess.tape.relu(t)?;
    let t = linear(sess, ps, &format!("{prefix}.fc2"), t)?;
    let z = sess.tape.reshape(t, &[b, c, 1, 1])?;
    let z = sess.tape.broadcast_axis(z, 2, h)?;
    let z = sess.tape.broadcast_axis(z, 3, w)?;
    Ok(sess.tape.add(x, z)?)
}

/// Softmax mask of the simplified non-local block for one `(C, H, W)`
/// image, as an `(H, W)` map.
pub fn snl_mask_map<T: Scalar>(
    ps: &ParameterSet<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(AttentionError::BadInput {
            op: "snl_mask_map",
            expected: "rank-3 feature map (C, H, W)".into(),
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut sess = Session::new(Mode::Eval);
    let batched = Tensor::new(&[1, s[0], h, w], x.data().to_vec()).expect("same numel");
    let id = sess.input(batched);
    let m = snl_mask(&mut sess, ps, prefix, id)?;
    Ok(Tensor::new(&[h, w], sess.tape.value(m).data().to_vec()).expect("same numel"))
}

// ---- squeeze-and-excitation ----

/// Squeeze-and-excitation parameters: a bottleneck pair of linears with
/// reduction `r`, under `<prefix>.{fc1,fc2}`.
pub fn register_se<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c: usize,
    r: usize,
) -> Result<()> {
    let mid = (c / r).max(1);
    register_linear(ps, rng, &format!("{prefix}.fc1"), c, mid)?;
    register_linear(ps, rng, &format!("{prefix}.fc2"), mid, c)?;
    Ok(())
}

/// Squeeze-and-excitation channel gate: `(B, C, 1, 1)` in `(0, 1)`.
pub fn se_gate<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let [b, c, _h, _w] = shape4(sess, x, "se")?;
    let pooled = global_avg_pool(sess, x)?;
    let t = linear(sess, ps, &format!("{prefix}.fc1"), pooled)?;
    let t = sess.tape.relu(t)?;
    let t = linear(sess, ps, &format!("{prefix}.fc2"), t)?;
    let t = sess.tape.sigmoid(t)?;
    Ok(sess.tape.reshape(t, &[b, c, 1, 1])?)
}

/// Squeeze-and-excitation: features scaled by a globally pooled channel
/// gate.
pub fn se_forward<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let g = se_gate(sess, ps, prefix, x)?;
    apply_channel_gate(sess, x, g)
}

// ---- CBAM channel branch ----

/// CBAM channel-branch parameters: one bottleneck MLP shared between the
/// average- and max-pooled descriptors, under `<prefix>.{fc1,fc2}`.
pub fn register_cbam_c<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c: usize,
    r: usize,
) -> Result<()> {
    register_se(ps, rng, prefix, c, r)
}

/// CBAM channel gate: shared MLP over average- and max-pooled descriptors,
/// summed, sigmoid; `(B, C, 1, 1)`.
pub fn cbam_c_gate<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let [b, c, _h, _w] = shape4(sess, x, "cbam_c")?;
    let fc1 = format!("{prefix}.fc1");
    let fc2 = format!("{prefix}.fc2");
    let through = |sess: &mut Session<T>, v: NodeId| -> Result<NodeId> {
        let t = linear(sess, ps, &fc1, v)?;
        let t = sess.tape.relu(t)?;
        Ok(linear(sess, ps, &fc2, t)?)
    };
    let avg = global_avg_pool(sess, x)?;
    let mx = global_max_pool(sess, x)?;
    let sa = through(sess, avg)?;
    let sm = through(sess, mx)?;
    let sum = sess.tape.add(sa, sm)?;
    let g = sess.tape.sigmoid(sum)?;
    Ok(sess.tape.reshape(g, &[b, c, 1, 1])?)
}

/// CBAM channel branch: features scaled by the shared-MLP channel gate.
pub fn cbam_c_forward<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let g = cbam_c_gate(sess, ps, prefix, x)?;
    apply_channel_gate(sess, x, g)
}

// ---- CBAM spatial branch ----

/// CBAM spatial-branch parameters: a single 7x7 conv over the two pooled
/// channel descriptors, under `<prefix>.conv`.
pub fn register_cbam_s<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
) -> Result<()> {
    register_conv(ps, rng, &format!("{prefix}.conv"), 2, 1, 7)?;
    Ok(())
}

/// CBAM spatial gate: channelwise mean and max maps, concatenated and run
/// through a padded 7x7 conv, sigmoid; `(B, 1, H, W)`.
pub fn cbam_s_gate<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let [b, _c, h, w] = shape4(sess, x, "cbam_s")?;
    let avg = sess.tape.mean_axis(x, 1)?;
    let avg = sess.tape.reshape(avg, &[b, 1, h, w])?;
    let mx = sess.tape.max_axis(x, 1)?;
    let mx = sess.tape.reshape(mx, &[b, 1, h, w])?;
    let both = sess.tape.concat(&[avg, mx], 1)?;
    let m = conv(sess, ps, &format!("{prefix}.conv"), both, 1, 3)?;
    Ok(sess.tape.sigmoid(m)?)
}

/// CBAM spatial branch: features scaled by the pooled-descriptor spatial
/// gate.
pub fn cbam_s_forward<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let g = cbam_s_gate(sess, ps, prefix, x)?;
    apply_spatial_gate(sess, x, g)
}
