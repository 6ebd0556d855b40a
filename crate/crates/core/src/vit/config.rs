use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::normalizers::Normalizer;
use crate::numerics::DEFAULT_LN_EPS;

/// Architecture of a pre-norm ViT with a CLS token and optional registers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    pub n_registers: usize,
    pub normalizer: Normalizer,
    pub ln_eps: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::vit_small()
    }
}

impl VitConfig {
    /// ViT-S/16 at 224 px: 384 wide, 6 heads, 12 layers.
    pub fn vit_small() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            d_model: 384,
            n_heads: 6,
            n_layers: 12,
            mlp_ratio: 4,
            n_registers: 0,
            normalizer: Normalizer::Softmax,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    /// Desk-scale preset used throughout the tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 4,
            n_registers: 0,
            normalizer: Normalizer::Softmax,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.normalizer = normalizer;
        self
    }

    pub fn with_registers(mut self, n: usize) -> Self {
        self.n_registers = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size ({}) must be a positive multiple of patch_size ({})",
                self.image_size, self.patch_size
            ));
        }
        if self.n_layers == 0 || self.mlp_ratio == 0 {
            return fail("n_layers and mlp_ratio must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            normalizer: self.normalizer,
        }
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `1 + n_registers + n_patches`.
    pub fn n_tokens(&self) -> usize {
        1 + self.n_registers + self.n_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Number of scalar parameters in a model built from this config.
    pub fn parameter_count(&self) -> usize {
        let (d, h) = (self.d_model, self.mlp_hidden());
        let embed = self.patch_dim() * d + d + self.n_patches() * d + d + self.n_registers * d;
        let block = 2 * d + (4 * d * d + 4 * d) + 2 * d + (d * h + h) + (h * d + d);
        embed + self.n_layers * block + 2 * d
    }
}
