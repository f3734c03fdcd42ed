use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How token positions enter the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// Rotary encoding of queries and keys by original position id.
    #[default]
    Rotary,
    /// Learned absolute embedding added to the input rows.
    Learned,
}

/// Decoder dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub vision_width: usize,
    /// Zero disables adapters.
    #[serde(default)]
    pub lora_rank: usize,
    #[serde(default = "default_lora_scale")]
    pub lora_scale: f64,
    /// Gated three-matrix feed-forward; two-matrix when false.
    #[serde(default = "default_true")]
    pub gated_ffn: bool,
    #[serde(default)]
    pub positions: PositionEncoding,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_lora_scale() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_rope_base() -> f64 {
    10_000.0
}
fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// Small config used by tests and the toy experiments.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            width: 16,
            heads: 2,
            ffn_width: 32,
            vocab: 24,
            max_positions: 64,
            vision_width: 8,
            lora_rank: 0,
            lora_scale: 1.0,
            gated_ffn: true,
            positions: PositionEncoding::Rotary,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("vocab", self.vocab),
            ("max_positions", self.max_positions),
            ("vision_width", self.vision_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.positions == PositionEncoding::Rotary && self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary encoding needs an even head dimension".into()));
        }
        if !(self.lora_scale.is_finite() && self.norm_eps > 0.0 && self.rope_base > 1.0) {
            return Err(Error::Config("lora_scale, norm_eps or rope_base out of range".into()));
        }
        Ok(())
    }
}
