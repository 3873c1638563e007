use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Architecture and contrastive-learning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Fused feature width.
    pub d: usize,
    /// Text embedding width.
    pub d_e: usize,
    /// Adapted latent width used by the symbol-image similarity.
    pub d_1: usize,
    pub text_layers: usize,
    pub image_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    /// Full text length including `[CLS]` and the symbol slot.
    pub max_text_len: usize,
    pub tau_init: f64,
    pub queue_size: usize,
    pub momentum: f64,
    pub distill_weight: f64,
    /// Standard deviation of the truncated-normal weight init.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized configuration used by the tests and the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            d: 32,
            d_e: 32,
            d_1: 16,
            text_layers: 2,
            image_layers: 2,
            fusion_layers: 2,
            heads: 4,
            patch_size: 8,
            image_size: 32,
            vocab_size: 256,
            max_text_len: 24,
            tau_init: 0.07,
            queue_size: 64,
            momentum: 0.995,
            distill_weight: 0.4,
            init_std: 0.1,
        }
    }

    /// Published model scale: BERT-base text layers, ViT-B/16 at 256px, 6 fusion layers.
    pub fn full_scale() -> Self {
        Self {
            d: 768,
            d_e: 768,
            d_1: 256,
            text_layers: 6,
            image_layers: 12,
            fusion_layers: 6,
            heads: 12,
            patch_size: 16,
            image_size: 256,
            vocab_size: 30522,
            max_text_len: 128,
            tau_init: 0.07,
            queue_size: 65535,
            momentum: 0.995,
            distill_weight: 0.4,
            init_std: 0.02,
        }
    }

    /// Minimal configuration for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            d_e: 6,
            d_1: 4,
            text_layers: 1,
            image_layers: 1,
            fusion_layers: 1,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            vocab_size: 32,
            max_text_len: 12,
            tau_init: 0.07,
            queue_size: 8,
            momentum: 0.995,
            distill_weight: 0.4,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("d_e", self.d_e),
            ("d_1", self.d_1),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("vocab_size", self.vocab_size),
            ("queue_size", self.queue_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                bail!(InvalidConfig, "{name} must be at least 1");
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            bail!(InvalidConfig, "d = {} is not divisible by heads = {}", self.d, self.heads);
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            bail!(
                InvalidConfig,
                "image_size = {} is not divisible by patch_size = {}",
                self.image_size,
                self.patch_size
            );
        }
        if self.max_text_len < 2 {
            bail!(InvalidConfig, "max_text_len must be at least 2");
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            bail!(InvalidConfig, "tau_init must be positive, got {}", self.tau_init);
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            bail!(InvalidConfig, "momentum must lie in (0, 1], got {}", self.momentum);
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            bail!(InvalidConfig, "init_std must be positive, got {}", self.init_std);
        }
        if !(0.0..1.0).contains(&self.distill_weight) {
            bail!(InvalidConfig, "distill_weight must lie in [0, 1), got {}", self.distill_weight);
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}
