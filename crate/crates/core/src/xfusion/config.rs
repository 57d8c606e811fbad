use serde::{Deserialize, Serialize};

use crate::encoding::{CombineMode, PositionalScope};
use crate::error::{Result, XfiError};

/// Fusion architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One X-Fusion block applied `iterations` times with key-value pairs generated once.
    #[default]
    IterativeSharedBlock,
    /// `iterations` independent blocks; each layer regenerates key-value pairs from the
    /// previous layer's modality blocks.
    StackedFreshKv,
    /// `iterations` independent blocks sharing the key-value pairs of the encoder features.
    StackedSharedKv,
    /// Plain self-attention encoder over the multi-modal embedding, pooled to `n_f` tokens.
    TransformerOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::IterativeSharedBlock,
        Variant::StackedFreshKv,
        Variant::StackedSharedKv,
        Variant::TransformerOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IterativeSharedBlock => "iterative-shared-block",
            Variant::StackedFreshKv => "stacked-fresh-kv",
            Variant::StackedSharedKv => "stacked-shared-kv",
            Variant::TransformerOnly => "transformer-only",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = XfiError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| XfiError::Config(format!("unknown variant `{s}`")))
    }
}

/// Downstream task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Keypoint regression.
    Hpe,
    /// Activity classification.
    Har,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Hpe => "hpe",
            TaskKind::Har => "har",
        }
    }
}

/// Task plus its output geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub joints: usize,
    pub classes: usize,
}

impl TaskSpec {
    pub fn hpe(joints: usize) -> Self {
        Self {
            kind: TaskKind::Hpe,
            joints,
            classes: 0,
        }
    }

    pub fn har(classes: usize) -> Self {
        Self {
            kind: TaskKind::Har,
            joints: 0,
            classes,
        }
    }

    /// `3·J` for keypoints, `C` for logits.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Hpe => 3 * self.joints,
            TaskKind::Har => self.classes,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Tokens per modality block and in the cross-modal embedding.
    pub n_f: usize,
    pub d_f: usize,
    pub heads: usize,
    pub scale: f64,
    /// Iterations of the shared block, or depth of the stacked variants.
    pub iterations: usize,
    pub ffn_hidden: usize,
    pub variant: Variant,
    pub post_norm: bool,
    pub dropout_rate: f64,
    pub positional_encoding: bool,
    pub positional_scope: PositionalScope,
    pub combine_mode: CombineMode,
    /// Initialize attention output projections to the identity.
    pub identity_attn_out: bool,
    pub norm_eps: f64,
}

impl FusionConfig {
    /// `n_f = 8`, `d_f = 64`, 4 heads, scale 0.25, 4 iterations.
    pub fn desk() -> Self {
        Self {
            n_f: 8,
            d_f: 64,
            heads: 4,
            scale: 0.25,
            iterations: 4,
            ffn_hidden: 128,
            variant: Variant::IterativeSharedBlock,
            post_norm: true,
            dropout_rate: 0.0,
            positional_encoding: true,
            positional_scope: PositionalScope::AllBlocks,
            combine_mode: CombineMode::Concat,
            identity_attn_out: false,
            norm_eps: 1e-5,
        }
    }

    /// 32 tokens of width 512, 8 heads, scale 0.125.
    pub fn paper() -> Self {
        Self {
            n_f: 32,
            d_f: 512,
            heads: 8,
            scale: 0.125,
            ffn_hidden: 1024,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_f == 0 || self.d_f == 0 || self.ffn_hidden == 0 {
            return Err(XfiError::Config("n_f, d_f and ffn_hidden must be positive".into()));
        }
        if self.heads == 0 || !self.d_f.is_multiple_of(self.heads) {
            return Err(XfiError::Config(format!(
                "d_f {} is not divisible by {} heads",
                self.d_f, self.heads
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(XfiError::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        if self.iterations == 0 {
            return Err(XfiError::Config("iterations must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(XfiError::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(XfiError::Config("norm_eps must be > 0".into()));
        }
        Ok(())
    }
}
