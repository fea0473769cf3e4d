//! Model presets at three scales and the shared optimizer block.
//!
//! `full_*` reproduces the reference geometry (W = 100 samples at 1 kHz,
//! d = 160). `desk_*` keeps W = 100 and the regressor law but shrinks widths
//! so a CPU can train it in minutes. `tiny_*` exists for gradient checks.

use alloc::vec;

use crate::autograd::Activation;
use crate::downstream::ClassifierConfig;
use crate::encoder::{ConvSpec, EncoderConfig};
use crate::error::{bail, Result};
use crate::layers::TransformerConfig;
use crate::mae::MaeConfig;
use crate::optim::{AdamWConfig, CosineWarmupSchedule};
use crate::quantizer::QuantizerConfig;
use crate::vqvae::{RegressorConfig, TConvSpec, VqvaeConfig};

pub const DEFAULT_MASK_RATIO: f64 = 0.5;
pub const DEFAULT_T_MAX: usize = 40;

const fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> ConvSpec {
    ConvSpec { out_channels, kernel, stride, pad }
}

const fn tconv(out_channels: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> TConvSpec {
    TConvSpec { out_channels, kernel, stride, pad, out_pad }
}

fn full_transformer(n_layers: usize) -> TransformerConfig {
    TransformerConfig { n_layers, d_model: 160, n_heads: 8, head_dim: 64, ffn_dim: 320, attn_dropout: 0.2, mlp_dropout: [0.2, 0.0] }
}

fn desk_transformer(n_layers: usize) -> TransformerConfig {
    TransformerConfig { n_layers, d_model: 64, n_heads: 4, head_dim: 16, ffn_dim: 128, attn_dropout: 0.2, mlp_dropout: [0.2, 0.0] }
}

fn tiny_transformer(n_layers: usize) -> TransformerConfig {
    TransformerConfig { n_layers, d_model: 8, n_heads: 2, head_dim: 4, ffn_dim: 16, attn_dropout: 0.0, mlp_dropout: [0.0, 0.0] }
}

pub fn full_encoder(n_channels: usize) -> EncoderConfig {
    EncoderConfig {
        n_channels,
        patch_len: 100,
        proj_channels: 16,
        convs: vec![conv(128, 19, 10, 9), conv(128, 3, 1, 1), conv(16, 3, 1, 1)],
        conv_activation: Activation::Gelu,
        transformer: full_transformer(8),
        t_max: DEFAULT_T_MAX,
    }
}

pub fn desk_encoder(n_channels: usize) -> EncoderConfig {
    EncoderConfig {
        n_channels,
        patch_len: 100,
        proj_channels: 16,
        convs: vec![conv(32, 25, 25, 0), conv(32, 3, 1, 1), conv(16, 3, 1, 1)],
        conv_activation: Activation::Gelu,
        transformer: desk_transformer(4),
        t_max: DEFAULT_T_MAX,
    }
}

/// W = 10, d = 8: small enough for finite differences over every parameter.
pub fn tiny_encoder(n_channels: usize) -> EncoderConfig {
    EncoderConfig {
        n_channels,
        patch_len: 10,
        proj_channels: 4,
        convs: vec![conv(8, 5, 5, 0), conv(4, 3, 1, 1)],
        conv_activation: Activation::Gelu,
        transformer: tiny_transformer(2),
        t_max: DEFAULT_T_MAX,
    }
}

/// Head maps N patches to exactly 100·N samples.
fn hundredfold_head(wide: usize, narrow: usize) -> vec::Vec<TConvSpec> {
    vec![
        tconv(wide, 3, 1, 1, 0),
        tconv(wide, 3, 1, 1, 0),
        tconv(wide, 10, 10, 0, 0),
        tconv(narrow, 9, 1, 4, 0),
        tconv(narrow, 19, 10, 9, 9),
    ]
}

pub fn full_vqvae(n_channels: usize) -> VqvaeConfig {
    VqvaeConfig {
        encoder: full_encoder(n_channels),
        quantizer: QuantizerConfig::default(),
        regressor: RegressorConfig { transformer: full_transformer(4), head: hundredfold_head(128, 16), add_temporal: false },
    }
}

pub fn desk_vqvae(n_channels: usize) -> VqvaeConfig {
    VqvaeConfig {
        encoder: desk_encoder(n_channels),
        quantizer: QuantizerConfig { n_codex: 256, d_codex: 32, ..QuantizerConfig::default() },
        regressor: RegressorConfig { transformer: desk_transformer(2), head: hundredfold_head(32, 16), add_temporal: false },
    }
}

pub fn tiny_vqvae(n_channels: usize) -> VqvaeConfig {
    VqvaeConfig {
        encoder: tiny_encoder(n_channels),
        quantizer: QuantizerConfig { n_codex: 16, d_codex: 4, ..QuantizerConfig::default() },
        regressor: RegressorConfig {
            transformer: tiny_transformer(1),
            head: vec![tconv(8, 3, 1, 1, 0), tconv(4, 10, 10, 0, 0)],
            add_temporal: false,
        },
    }
}

/// Masked model sharing the tokenizer's encoder geometry and vocabulary.
pub fn mae_for(vqvae: &VqvaeConfig) -> MaeConfig {
    MaeConfig { encoder: vqvae.encoder.clone(), n_codex: vqvae.quantizer.n_codex, mask_ratio: DEFAULT_MASK_RATIO }
}

pub fn full_mae(n_channels: usize) -> MaeConfig {
    mae_for(&full_vqvae(n_channels))
}

pub fn desk_mae(n_channels: usize) -> MaeConfig {
    mae_for(&desk_vqvae(n_channels))
}

pub fn tiny_mae(n_channels: usize) -> MaeConfig {
    mae_for(&tiny_vqvae(n_channels))
}

pub fn full_classifier(n_channels: usize, n_classes: usize) -> ClassifierConfig {
    ClassifierConfig { encoder: full_encoder(n_channels), hidden: 128, n_classes }
}

pub fn desk_classifier(n_channels: usize, n_classes: usize) -> ClassifierConfig {
    ClassifierConfig { encoder: desk_encoder(n_channels), hidden: 128, n_classes }
}

/// Optimizer and schedule for one training stage.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Random time shifts on training samples (classification only).
    pub augment: bool,
}

impl TrainConfig {
    pub fn vqvae() -> Self {
        Self { batch_size: 64, max_lr: 3e-4, min_lr: 5e-5, weight_decay: 0.01, epochs: 400, warmup_epochs: 40, seed: 0, augment: false }
    }

    pub fn mae() -> Self {
        Self { weight_decay: 0.05, ..Self::vqvae() }
    }

    pub fn classifier() -> Self {
        Self { batch_size: 32, max_lr: 2e-4, min_lr: 5e-6, weight_decay: 0.05, epochs: 200, warmup_epochs: 20, seed: 0, augment: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(InvalidArgument, "batch_size must be positive");
        }
        if self.epochs == 0 {
            bail!(InvalidArgument, "epochs must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            bail!(InvalidArgument, "weight_decay must be >= 0, got {}", self.weight_decay);
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<CosineWarmupSchedule> {
        CosineWarmupSchedule::new(self.max_lr, self.min_lr, self.warmup_epochs, self.epochs)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        full_vqvae(10).validate().unwrap();
        desk_vqvae(10).validate().unwrap();
        tiny_vqvae(3).validate().unwrap();
        full_mae(10).validate().unwrap();
        full_classifier(10, 61).validate().unwrap();
        for t in [TrainConfig::vqvae(), TrainConfig::mae(), TrainConfig::classifier()] {
            t.validate().unwrap();
        }
    }

    #[test]
    fn desk_embedding_width() {
        let e = desk_encoder(10);
        assert_eq!(e.conv_lengths().unwrap(), vec![100, 4, 4, 4]);
        assert_eq!(e.embed_dim().unwrap(), 64);
    }
}
