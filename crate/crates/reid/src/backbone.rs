//! Small convolutional embedding network: a stack of 3x3 conv + BN + relu
//! blocks with optional attention after each block, global average pooling,
//! a linear embedding, and a linear classifier head.
//!
//! Every component draws its initial weights from a keyed substream, so two
//! configurations that share a component initialise it bit-identically —
//! in particular, adding attention does not disturb the backbone weights.

use rga_attention::{
    compose, compose_count, conv_bn_count, conv_bn_relu, linear, linear_count, register_compose,
    register_conv_bn, register_linear, AttentionConfig, ModuleKind,
};
use rga_tensor::{Mode, NodeId, ParameterSet, Scalar, Session, Stream, StreamRng, Tensor};

use crate::error::{ReidError, Result};

/// Substream keys for per-component initialisation.
const KEY_BLOCK: u64 = 0;
const KEY_ATTENTION: u64 = 64;
const KEY_EMBED: u64 = 128;
const KEY_LOGITS: u64 = 129;

#[derive(Clone, Debug)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// Output channel width of each block.
    pub widths: Vec<usize>,
    /// Whether each block downsamples by stride 2.
    pub downsample: Vec<bool>,
    /// Attention module applied after flagged blocks; `None` is the plain
    /// baseline.
    pub attention: Option<ModuleKind>,
    pub insert_after: Vec<bool>,
    /// When set, attention parameters exist but every gate is forced to the
    /// identity: the network computes exactly the attention-free baseline.
    pub bypass_gates: bool,
    /// Overrides the relation-aware attention knobs (`None` keeps the
    /// module's canonical settings). The composition always follows the
    /// module kind, so the `composition` field here is ignored.
    pub attention_cfg: Option<AttentionConfig>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            in_h: 64,
            in_w: 32,
            widths: vec![16, 32, 64, 128],
            downsample: vec![true, true, true, false],
            attention: None,
            insert_after: vec![true, true, true, true],
            bypass_gates: false,
            attention_cfg: None,
            embed_dim: 64,
            num_classes: 16,
        }
    }
}

fn conv_out(extent: usize, stride: usize) -> usize {
    // 3x3 kernel, padding 1: out = floor((extent + 2 - 3) / stride) + 1.
    (extent - 1) / stride + 1
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(ReidError::BadConfig("backbone needs at least one block".into()));
        }
        if self.widths.len() != self.downsample.len() || self.widths.len() != self.insert_after.len()
        {
            return Err(ReidError::BadConfig(format!(
                "widths ({}), downsample ({}) and insert_after ({}) must have equal length",
                self.widths.len(),
                self.downsample.len(),
                self.insert_after.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(ReidError::BadConfig("block widths must be positive".into()));
        }
        if self.embed_dim == 0 || self.num_classes < 2 {
            return Err(ReidError::BadConfig(
                "embedding dim must be positive and num_classes at least 2".into(),
            ));
        }
        if self.attention_cfg.is_some() {
            match self.attention {
                Some(kind) if kind.attention_config().is_some() => {}
                _ => {
                    return Err(ReidError::BadConfig(
                        "attention settings apply only to the relation-aware modules".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// The attention configuration actually used at insertion blocks:
    /// the override with the kind's composition, or the kind's canonical
    /// settings. `None` for baselines and attention-free models.
    pub fn effective_attention(&self) -> Option<AttentionConfig> {
        let base = self.attention?.attention_config()?;
        Some(match &self.attention_cfg {
            Some(custom) => AttentionConfig {
                composition: base.composition,
                ..custom.clone()
            },
            None => base,
        })
    }

    /// `(channels, height, width)` after each block.
    pub fn block_dims(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.in_h, self.in_w);
        let mut dims = Vec::with_capacity(self.widths.len());
        for (i, &c) in self.widths.iter().enumerate() {
            let stride = if self.downsample[i] { 2 } else { 1 };
            h = conv_out(h, stride);
            w = conv_out(w, stride);
            dims.push((c, h, w));
        }
        dims
    }

    fn attention_blocks(&self) -> Vec<usize> {
        match self.attention {
            None => Vec::new(),
            Some(_) => (0..self.widths.len())
                .filter(|&i| self.insert_after[i])
                .collect(),
        }
    }
}

/// Registers every model parameter under `block<i>`, `attn<i>`, `embed`,
/// `logits`.
pub fn register_model<T: Scalar>(
    ps: &mut ParameterSet<T>,
    seed: u64,
    cfg: &BackboneConfig,
) -> Result<()> {
    cfg.validate()?;
    let dims = cfg.block_dims();
    let mut c_in = cfg.in_channels;
    for (i, &c_out) in cfg.widths.iter().enumerate() {
        let mut rng = StreamRng::derive(seed, Stream::Init, KEY_BLOCK + i as u64);
        register_conv_bn(ps, &mut rng, &format!("block{i}"), c_in, c_out, 3)?;
        c_in = c_out;
    }
    if let Some(kind) = cfg.attention {
        let acfg = cfg.effective_attention();
        for i in cfg.attention_blocks() {
            let (c, h, w) = dims[i];
            let mut rng = StreamRng::derive(seed, Stream::Init, KEY_ATTENTION + i as u64);
            match &acfg {
                Some(acfg) => register_compose(ps, &mut rng, &format!("attn{i}"), c, h, w, acfg)?,
                None => kind.register(ps, &mut rng, &format!("attn{i}"), c, h, w)?,
            }
        }
    }
    let gap_c = *cfg.widths.last().expect("validated nonempty");
    let mut rng = StreamRng::derive(seed, Stream::Init, KEY_EMBED);
    register_linear(ps, &mut rng, "embed", gap_c, cfg.embed_dim)?;
    let mut rng = StreamRng::derive(seed, Stream::Init, KEY_LOGITS);
    register_linear(ps, &mut rng, "logits", cfg.embed_dim, cfg.num_classes)?;
    Ok(())
}

/// Closed-form count of trainable parameters for a configuration.
pub fn model_param_count(cfg: &BackboneConfig) -> usize {
    let mut total = 0;
    let mut c_in = cfg.in_channels;
    for &c_out in &cfg.widths {
        total += conv_bn_count(c_in, c_out, 3);
        c_in = c_out;
    }
    if let Some(kind) = cfg.attention {
        let dims = cfg.block_dims();
        let acfg = cfg.effective_attention();
        for i in cfg.attention_blocks() {
            let (c, h, w) = dims[i];
            total += match &acfg {
                Some(acfg) => compose_count(c, h, w, acfg),
                None => kind.param_count(c, h, w),
            };
        }
    }
    let gap_c = *cfg.widths.last().expect("nonempty widths");
    total + linear_count(gap_c, cfg.embed_dim) + linear_count(cfg.embed_dim, cfg.num_classes)
}

/// Builds the forward graph: `(embeddings (B, D), logits (B, K))`.
pub fn forward_graph<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    cfg: &BackboneConfig,
    images: NodeId,
) -> Result<(NodeId, NodeId)> {
    let shape = sess.tape.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.in_h || shape[3] != cfg.in_w
    {
        return Err(ReidError::BadInput {
            op: "forward",
            expected: format!(
                "images (B, {}, {}, {})",
                cfg.in_channels, cfg.in_h, cfg.in_w
            ),
            got: format!("{shape:?}"),
        });
    }
    let b = shape[0];
    let mut x = images;
    for i in 0..cfg.widths.len() {
        x = block_with_attention(sess, ps, cfg, x, i)?;
    }
    let last = sess.tape.value(x).shape().to_vec();
    let flat = sess.tape.reshape(x, &[b, last[1], last[2] * last[3]])?;
    let pooled = sess.tape.mean_axis(flat, 2)?;
    let embeddings = linear(sess, ps, "embed", pooled)?;
    let logits = linear(sess, ps, "logits", embeddings)?;
    Ok((embeddings, logits))
}

/// One block's convolution followed by its attention stage (when flagged
/// and not bypassed).
fn block_with_attention<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    cfg: &BackboneConfig,
    x: NodeId,
    i: usize,
) -> Result<NodeId> {
    let mut x = conv_bn_relu(sess, ps, &format!("block{i}"), x, if cfg.downsample[i] { 2 } else { 1 }, 1)?;
    if let Some(kind) = cfg.attention {
        if cfg.insert_after[i] && !cfg.bypass_gates {
            x = match cfg.effective_attention() {
                Some(acfg) => compose(sess, ps, &format!("attn{i}"), x, &acfg)?,
                None => kind.forward(sess, ps, &format!("attn{i}"), x)?,
            };
        }
    }
    Ok(x)
}

/// Eval-mode features entering block `block`'s attention stage for one
/// `(C, H, W)` image: that block's convolution output, with attention
/// already applied to every earlier flagged block.
pub fn features_before_attention<T: Scalar>(
    ps: &ParameterSet<T>,
    cfg: &BackboneConfig,
    image: &Tensor<T>,
    block: usize,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if block >= cfg.widths.len() {
        return Err(ReidError::BadConfig(format!(
            "block {block} out of range for a {}-block model",
            cfg.widths.len()
        )));
    }
    let s = image.shape().to_vec();
    if s.len() != 3 || s != [cfg.in_channels, cfg.in_h, cfg.in_w] {
        return Err(ReidError::BadInput {
            op: "features_before_attention",
            expected: format!("image ({}, {}, {})", cfg.in_channels, cfg.in_h, cfg.in_w),
            got: format!("{s:?}"),
        });
    }
    let mut sess = Session::new(Mode::Eval);
    let batched = Tensor::new(&[1, s[0], s[1], s[2]], image.data().to_vec())?;
    let mut x = sess.input(batched);
    for i in 0..block {
        x = block_with_attention(&mut sess, ps, cfg, x, i)?;
    }
    let stride = if cfg.downsample[block] { 2 } else { 1 };
    x = conv_bn_relu(&mut sess, ps, &format!("block{block}"), x, stride, 1)?;
    let v = sess.tape.value(x);
    let vs = v.shape().to_vec();
    Ok(Tensor::new(&[vs[1], vs[2], vs[3]], v.data().to_vec())?)
}

/// Embeddings and logits for a batch of samples, in eval mode.
pub struct EmbeddingBatch {
    pub embeddings: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Stacks `(C, H, W)` images into a single `(B, C, H, W)` input tensor.
pub fn stack_images<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| ReidError::BadConfig("cannot stack an empty image list".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape {
            return Err(ReidError::BadInput {
                op: "stack_images",
                expected: format!("{shape:?}"),
                got: format!("{:?}", img.shape()),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Ok(Tensor::new(&full, data)?)
}

/// Runs the model in eval mode over samples, batched to bound graph size.
pub fn backbone_forward(
    ps: &ParameterSet<f32>,
    cfg: &BackboneConfig,
    samples: &[crate::dataset::Sample],
    batch: usize,
) -> Result<EmbeddingBatch> {
    if samples.is_empty() {
        return Err(ReidError::BadConfig("cannot embed an empty sample list".into()));
    }
    for s in samples {
        if s.id >= cfg.num_classes {
            return Err(ReidError::LabelOutOfRange {
                label: s.id,
                classes: cfg.num_classes,
            });
        }
    }
    let batch = batch.max(1);
    let mut embeddings = Vec::new();
    let mut logits = Vec::new();
    for chunk in samples.chunks(batch) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let input = stack_images(&images)?;
        let mut sess = Session::new(Mode::Eval);
        let id = sess.input(input);
        let (e, l) = forward_graph(&mut sess, ps, cfg, id)?;
        embeddings.extend_from_slice(sess.tape.value(e).data());
        logits.extend_from_slice(sess.tape.value(l).data());
    }
    Ok(EmbeddingBatch {
        embeddings: Tensor::new(&[samples.len(), cfg.embed_dim], embeddings)?,
        logits: Tensor::new(&[samples.len(), cfg.num_classes], logits)?,
        labels: samples.iter().map(|s| s.id).collect(),
    })
}
