use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by every encoder and the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub proj_dim: usize,
    pub max_text_len: usize,
    /// Length limit of the linearized specific-knowledge sentence.
    pub sk_max_len: usize,
    /// Bias term in the contrastive projection heads.
    pub proj_bias: bool,
    /// Use the report encoder's attention stack for graph and triplet encoding too.
    pub tie_knowledge_encoders: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            patch_size: 8,
            image_size: 64,
            channels: 1,
            proj_dim: 32,
            max_text_len: 64,
            sk_max_len: 90,
            proj_bias: true,
            tie_knowledge_encoders: false,
        }
    }
}

impl EncoderConfig {
    /// Smallest useful configuration, used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            patch_size: 4,
            image_size: 8,
            channels: 1,
            proj_dim: 4,
            max_text_len: 12,
            sk_max_len: 16,
            proj_bias: true,
            tie_knowledge_encoders: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.proj_dim == 0 || self.channels == 0 {
            return bad("layer count, ffn_mult, proj_dim and channels must be positive".into());
        }
        if self.max_text_len < 3 || self.sk_max_len < 1 {
            return bad("text length limits too small".into());
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Rows of an encoded image: class token plus patches.
    pub fn image_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn max_positions(&self) -> usize {
        self.max_text_len.max(self.sk_max_len)
    }
}
