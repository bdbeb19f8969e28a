use crate::error::{AttentionError, Result};

/// How the pairwise-affinity embeddings are parameterised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// Separate transforms for the two sides of the dot product.
    Asymmetric,
    /// One shared transform for both sides.
    Symmetric,
    /// Raw feature dot products, no learned embedding.
    None,
}

/// Which attention branches run, and in what order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    Spatial,
    Channel,
    /// Spatial first, then channel attention on the gated features.
    SpatialChannel,
    /// Channel first, then spatial attention on the gated features.
    ChannelSpatial,
    /// Both gates computed from the unmodulated input, applied jointly.
    Parallel,
}

impl Composition {
    pub fn uses_spatial(self) -> bool {
        !matches!(self, Composition::Channel)
    }

    pub fn uses_channel(self) -> bool {
        !matches!(self, Composition::Spatial)
    }
}

/// Knobs shared by the relation-aware attention modules.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    /// Reduction ratio for feature and relation embeddings.
    pub s1: usize,
    /// Reduction ratio inside the two-layer gating head.
    pub s2: usize,
    pub embedding_mode: EmbeddingMode,
    /// Feed the stacked pairwise relations into the gate.
    pub use_relation: bool,
    /// Feed the (pooled) original feature into the gate.
    pub use_original: bool,
    pub composition: Composition,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            s1: 8,
            s2: 8,
            embedding_mode: EmbeddingMode::Asymmetric,
            use_relation: true,
            use_original: true,
            composition: Composition::SpatialChannel,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_relation && !self.use_original {
            return Err(AttentionError::NoFeatures);
        }
        if self.s1 == 0 || self.s2 == 0 {
            return Err(AttentionError::ZeroRatio);
        }
        Ok(())
    }

    /// Hidden width of the two-layer gating head for `d_in` input channels.
    /// Integer division, floored at one channel.
    pub fn head_hidden(&self, d_in: usize) -> usize {
        (d_in / self.s2).max(1)
    }
}

pub(crate) fn require_divisible(what: &'static str, value: usize, s1: usize) -> Result<()> {
    if value % s1 != 0 {
        return Err(AttentionError::NotDivisible { what, value, s1 });
    }
    Ok(())
}
