use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Total downsampling of the convolutional stem.
pub const STEM_STRIDE: usize = 16;

/// Architecture hyper-parameters. Serialized into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub patch_grid: usize,
    pub k_local: usize,
    pub mask_ratio: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub image_size: usize,
    /// Output channels of the three stem stages.
    pub stem_channels: [usize; 3],
    /// Hidden width of every feed-forward block, as a multiple of `d`.
    pub ffn_mult: usize,
    pub degrade_factor: usize,
    /// Maximum number of views per sample (1 or 2).
    pub views: usize,
}

impl ModelConfig {
    /// Full-size settings: 512 wide, 8 heads, 3 + 3 layers, 14 × 14 tokens.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            d: 512,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            patch_grid: 14,
            k_local: 6,
            mask_ratio: 0.85,
            vocab_size,
            max_len: 60,
            image_size: 224,
            stem_channels: [32, 64, 1024],
            ffn_mult: 4,
            degrade_factor: 2,
            views: 2,
        }
    }

    /// Laptop-sized settings.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            k_local: 2,
            stem_channels: [8, 16, 32],
            views: 1,
            ..Self::paper(vocab_size)
        }
    }

    /// Smallest configuration with every component active: 8 wide, one
    /// layer each, a 4 × 4 grid on 64-pixel images. Meant for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            patch_grid: 4,
            k_local: 2,
            mask_ratio: 0.5,
            vocab_size,
            max_len: 16,
            image_size: 64,
            stem_channels: [2, 3, 4],
            ffn_mult: 2,
            degrade_factor: 2,
            views: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn tokens_per_view(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return bad(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            ));
        }
        if self.image_size != self.patch_grid * STEM_STRIDE {
            return bad(format!(
                "image_size {} does not give a {}x{} grid at stride {STEM_STRIDE}",
                self.image_size, self.patch_grid, self.patch_grid
            ));
        }
        if self.k_local == 0 || self.k_local > self.tokens_per_view() {
            return bad(format!(
                "k_local = {} outside [1, {}]",
                self.k_local,
                self.tokens_per_view()
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio = {} outside (0, 1)", self.mask_ratio));
        }
        if self.max_len < 3 {
            return bad(format!("max_len = {} < 3", self.max_len));
        }
        if self.vocab_size <= crate::data::MASK as usize {
            return bad(format!(
                "vocab_size = {} leaves no room for words",
                self.vocab_size
            ));
        }
        if !(1..=2).contains(&self.views) {
            return bad(format!("views = {} outside [1, 2]", self.views));
        }
        if self.degrade_factor == 0 || self.image_size % self.degrade_factor != 0 {
            return bad(format!(
                "degrade_factor {} does not divide image_size {}",
                self.degrade_factor, self.image_size
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_mult == 0 {
            return bad("layer counts and ffn_mult must be positive".into());
        }
        if self.stem_channels.contains(&0) {
            return bad("stem channels must be positive".into());
        }
        Ok(())
    }
}
