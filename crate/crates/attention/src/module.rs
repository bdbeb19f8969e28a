//! One dispatch point over every attention block so callers (benchmarks,
//! parameter counting, model assembly) can treat them uniformly.

use std::fmt;
use std::str::FromStr;

use rga_tensor::{NodeId, ParameterSet, Scalar, Session, StreamRng};

use crate::baselines::{
    cbam_c_forward, cbam_s_forward, nl_forward, register_cbam_c, register_cbam_s, register_nl,
    register_se, register_snl, se_forward, snl_forward,
};
use crate::config::{AttentionConfig, Composition};
use crate::count::{cbam_c_count, cbam_s_count, compose_count, nl_count, se_count, snl_count};
use crate::error::{AttentionError, Result};
use crate::rga::{compose, register_compose};

/// Bottleneck reduction shared by squeeze-and-excitation and the CBAM
/// channel branch.
pub const SE_REDUCTION: usize = 8;

/// Every attention block the workspace implements, relation-aware and
/// baseline alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    RgaS,
    RgaC,
    RgaSc,
    RgaCs,
    RgaPar,
    Nl,
    Snl,
    Se,
    CbamC,
    CbamS,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 10] = [
        ModuleKind::RgaS,
        ModuleKind::RgaC,
        ModuleKind::RgaSc,
        ModuleKind::RgaCs,
        ModuleKind::RgaPar,
        ModuleKind::Nl,
        ModuleKind::Snl,
        ModuleKind::Se,
        ModuleKind::CbamC,
        ModuleKind::CbamS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::RgaS => "rga-s",
            ModuleKind::RgaC => "rga-c",
            ModuleKind::RgaSc => "rga-sc",
            ModuleKind::RgaCs => "rga-cs",
            ModuleKind::RgaPar => "rga-par",
            ModuleKind::Nl => "nl",
            ModuleKind::Snl => "snl",
            ModuleKind::Se => "se",
            ModuleKind::CbamC => "cbam-c",
            ModuleKind::CbamS => "cbam-s",
        }
    }

    /// Attention configuration for the relation-aware kinds; `None` for the
    /// baselines.
    pub fn attention_config(self) -> Option<AttentionConfig> {
        let composition = match self {
            ModuleKind::RgaS => Composition::Spatial,
            ModuleKind::RgaC => Composition::Channel,
            ModuleKind::RgaSc => Composition::SpatialChannel,
            ModuleKind::RgaCs => Composition::ChannelSpatial,
            ModuleKind::RgaPar => Composition::Parallel,
            _ => return None,
        };
        Some(AttentionConfig {
            composition,
            ..AttentionConfig::default()
        })
    }

    /// Registers the block's parameters for a `(c, h, w)` input.
    pub fn register<T: Scalar>(
        self,
        ps: &mut ParameterSet<T>,
        rng: &mut StreamRng,
        prefix: &str,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<()> {
        match self {
            ModuleKind::RgaS
            | ModuleKind::RgaC
            | ModuleKind::RgaSc
            | ModuleKind::RgaCs
            | ModuleKind::RgaPar => {
                let cfg = self.attention_config().expect("relation-aware kind");
                register_compose(ps, rng, prefix, c, h, w, &cfg)
            }
            ModuleKind::Nl => register_nl(ps, rng, prefix, c),
            ModuleKind::Snl => register_snl(ps, rng, prefix, c),
            ModuleKind::Se => register_se(ps, rng, prefix, c, SE_REDUCTION),
            ModuleKind::CbamC => register_cbam_c(ps, rng, prefix, c, SE_REDUCTION),
            ModuleKind::CbamS => register_cbam_s(ps, rng, prefix),
        }
    }

    /// Builds the block's forward graph: gated features with the input's
    /// shape.
    pub fn forward<T: Scalar>(
        self,
        sess: &mut Session<T>,
        ps: &ParameterSet<T>,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            ModuleKind::RgaS
            | ModuleKind::RgaC
            | ModuleKind::RgaSc
            | ModuleKind::RgaCs
            | ModuleKind::RgaPar => {
                let cfg = self.attention_config().expect("relation-aware kind");
                compose(sess, ps, prefix, x, &cfg)
            }
            ModuleKind::Nl => nl_forward(sess, ps, prefix, x),
            ModuleKind::Snl => snl_forward(sess, ps, prefix, x),
            ModuleKind::Se => se_forward(sess, ps, prefix, x),
            ModuleKind::CbamC => cbam_c_forward(sess, ps, prefix, x),
            ModuleKind::CbamS => cbam_s_forward(sess, ps, prefix, x),
        }
    }

    /// Closed-form parameter count for a `(c, h, w)` input.
    pub fn param_count(self, c: usize, h: usize, w: usize) -> usize {
        match self {
            ModuleKind::RgaS
            | ModuleKind::RgaC
            | ModuleKind::RgaSc
            | ModuleKind::RgaCs
            | ModuleKind::RgaPar => {
                let cfg = self.attention_config().expect("relation-aware kind");
                compose_count(c, h, w, &cfg)
            }
            ModuleKind::Nl => nl_count(c),
            ModuleKind::Snl => snl_count(c),
            ModuleKind::Se => se_count(c, SE_REDUCTION),
            ModuleKind::CbamC => cbam_c_count(c, SE_REDUCTION),
            ModuleKind::CbamS => cbam_s_count(),
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleKind {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self> {
        ModuleKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| AttentionError::UnknownModule(s.to_string()))
    }
}
