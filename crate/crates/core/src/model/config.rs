use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_double_blocks: usize,
    pub num_single_blocks: usize,
    pub vocab_size: usize,
    pub max_text_tokens: usize,
    /// Width of the sinusoidal timestep features fed to the time MLP.
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            hidden_dim: 128,
            num_heads: 4,
            num_double_blocks: 4,
            num_single_blocks: 4,
            vocab_size: crate::model::tokenizer::VOCAB.len(),
            max_text_tokens: 8,
            time_embed_dim: 64,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            hidden_dim: 16,
            num_heads: 2,
            num_double_blocks: 2,
            num_single_blocks: 2,
            max_text_tokens: 8,
            time_embed_dim: 8,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid("image_size must be divisible by patch_size"));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(invalid("hidden_dim must be divisible by num_heads"));
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim == 0 {
            return Err(invalid("time_embed_dim must be even"));
        }
        if self.hidden_dim % 4 != 0 {
            return Err(invalid("hidden_dim must be divisible by 4 for 2-D position features"));
        }
        if self.vocab_size < crate::model::tokenizer::VOCAB.len() {
            return Err(invalid("vocab_size smaller than the built-in vocabulary"));
        }
        if self.num_double_blocks == 0 {
            return Err(invalid("at least one double block is required"));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_visual_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.image_size, self.image_size)
    }
}
