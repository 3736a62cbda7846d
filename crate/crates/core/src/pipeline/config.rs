use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Memory rows per layer for keys and for values.
    pub memory_slots: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 192,
            heads: 6,
            mlp_ratio: 4,
            memory_slots: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGranularity {
    /// One sigmoid per token and level.
    PerToken,
    /// One sigmoid per token, channel and level.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub gate_granularity: GateGranularity,
    /// Add the fused cross-attention result to the self-attention output
    /// instead of replacing it.
    pub fusion_residual: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            gate_granularity: GateGranularity::PerToken,
            fusion_residual: true,
        }
    }
}

/// Component switches: both off gives a plain masked autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Memory-augmented encoder attention.
    pub mem_enc: bool,
    /// Gated cross-attention over every encoder level.
    pub mc_dec: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            mem_enc: true,
            mc_dec: true,
        }
    }
}

impl Ablation {
    pub const PLAIN: Ablation = Ablation {
        mem_enc: false,
        mc_dec: false,
    };
    pub const MEMORY_ONLY: Ablation = Ablation {
        mem_enc: true,
        mc_dec: false,
    };
    pub const FULL: Ablation = Ablation {
        mem_enc: true,
        mc_dec: true,
    };

    pub fn label(&self) -> &'static str {
        match (self.mem_enc, self.mc_dec) {
            (false, false) => "plain",
            (true, false) => "mem-enc",
            (false, true) => "mc-dec",
            (true, true) => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_side: usize,
    pub mask_ratio: f64,
    /// Additive skips from block `i` to block `depth-1-i` in both stacks.
    pub long_skips: bool,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub ablation: Ablation,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_side: 16,
            mask_ratio: 0.75,
            long_skips: true,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            ablation: Ablation::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile for 64×64 grayscale images.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            patch_side: 8,
            encoder: EncoderConfig {
                depth: 4,
                width: 128,
                heads: 4,
                mlp_ratio: 4,
                memory_slots: 50,
            },
            decoder: DecoderConfig {
                depth: 2,
                width: 64,
                heads: 4,
                ..DecoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Memory slots actually instantiated (zero when the memory is ablated).
    pub fn effective_memory_slots(&self) -> usize {
        if self.ablation.mem_enc {
            self.encoder.memory_slots
        } else {
            0
        }
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_side;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid_dims();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_side == 0 || self.image_size % self.patch_side != 0 {
            return bad(format!(
                "image_size {} is not a multiple of patch_side {}",
                self.image_size, self.patch_side
            ));
        }
        if self.num_patches() < 2 {
            return bad("the patch grid needs at least 2 patches".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        for (name, depth, width, heads, mlp) in [
            ("encoder", self.encoder.depth, self.encoder.width, self.encoder.heads, self.encoder.mlp_ratio),
            ("decoder", self.decoder.depth, self.decoder.width, self.decoder.heads, self.decoder.mlp_ratio),
        ] {
            if depth == 0 || width == 0 || heads == 0 || mlp == 0 {
                return bad(format!("{name} depth, width, heads and mlp_ratio must be positive"));
            }
            if width % heads != 0 {
                return bad(format!("{name} width {width} not divisible by {heads} heads"));
            }
            if width % 2 != 0 {
                return bad(format!("{name} width {width} must be even for positional tables"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub random_resized_crop: bool,
    /// Fraction of the image area kept by the crop.
    pub scale: [f64; 2],
    /// Aspect-ratio range of the crop.
    pub ratio: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            random_resized_crop: true,
            scale: [0.5, 1.0],
            ratio: [3.0 / 4.0, 4.0 / 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    /// Emit a checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 256,
            base_lr: 1.5e-3,
            weight_decay: 0.05,
            warmup_epochs: 5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
            augmentation: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be smaller than epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        let [lo, hi] = self.augmentation.scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("crop scale range [{lo}, {hi}] invalid"));
        }
        let [rlo, rhi] = self.augmentation.ratio;
        if !(0.0 < rlo && rlo <= rhi) {
            return bad(format!("crop ratio range [{rlo}, {rhi}] invalid"));
        }
        Ok(())
    }
}
