use alloc::format;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab;

/// Shape and seed of the toy decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            vocab_size: 96,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

/// Feed-forward expansion factor.
pub const FF_MULT: usize = 4;

impl ModelConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 {
            return Err(Error::Config(format!(
                "num_layers, num_heads and model_dim must be positive (got {}, {}, {})",
                self.num_layers, self.num_heads, self.model_dim
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 8 {
            return Err(Error::Config(format!(
                "max_seq_len must be at least 8 (got {})",
                self.max_seq_len
            )));
        }
        if self.vocab_size < vocab::RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the {} reserved tokens",
                self.vocab_size,
                vocab::RESERVED
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.model_dim * FF_MULT
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers * self.num_heads
    }
}
