use serde::{Deserialize, Serialize};
use xmvae_core::dataset::DataConfig;
use xmvae_core::{QuantizationConfig, Vocabulary};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding and hidden size.
    pub d: usize,
    /// Latent size of both branches.
    pub d_z: usize,
    pub codebook_size: usize,
    pub encoder_layers: usize,
    pub temporal_decoder_layers: usize,
    pub subtoken_decoder_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Commitment weight.
    pub alpha: f64,
    /// Final KL weight, reached after `beta_anneal_epochs`.
    pub beta: f64,
    pub beta_anneal_epochs: usize,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    /// Codes whose EMA count stays below this over an epoch are reseeded.
    pub dead_code_threshold: f64,
    pub init_std: f64,
    /// Compound-token length cap.
    pub max_len: usize,
    pub vocab: Vocabulary,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            d_z: 512,
            codebook_size: 512,
            encoder_layers: 6,
            temporal_decoder_layers: 4,
            subtoken_decoder_layers: 2,
            heads: 8,
            ffn: 1024,
            alpha: 0.25,
            beta: 0.2,
            beta_anneal_epochs: 20,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            dead_code_threshold: 1e-3,
            init_std: 0.02,
            max_len: 512,
            vocab: Vocabulary::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: width 32, one layer per stack, eight codes.
    pub fn tiny() -> Self {
        Self {
            d: 32,
            d_z: 32,
            codebook_size: 8,
            encoder_layers: 1,
            temporal_decoder_layers: 1,
            subtoken_decoder_layers: 1,
            heads: 4,
            ffn: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_z", self.d_z),
            ("codebook_size", self.codebook_size),
            ("encoder_layers", self.encoder_layers),
            ("temporal_decoder_layers", self.temporal_decoder_layers),
            ("subtoken_decoder_layers", self.subtoken_decoder_layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d ({}) is not divisible by heads ({})",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.ema_epsilon <= 0.0 {
            return Err(Error::Config("alpha, beta must be >= 0 and ema_epsilon > 0".into()));
        }
        Ok(())
    }

    /// KL weight for a 1-based epoch: linear ramp from 0.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if self.beta_anneal_epochs == 0 {
            return self.beta;
        }
        self.beta * (epoch.saturating_sub(1) as f64 / self.beta_anneal_epochs as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub init_std: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            d: 256,
            layers: 6,
            heads: 8,
            ffn: 1024,
            init_std: 0.02,
        }
    }
}

impl PriorConfig {
    pub fn tiny() -> Self {
        Self {
            d: 32,
            layers: 1,
            heads: 4,
            ffn: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(
                "prior needs positive sizes with d divisible by heads".into(),
            ));
        }
        Ok(())
    }
}

/// Warmup, linear decay and a constant floor, in epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub warmup_epochs: usize,
    pub peak: f64,
    pub decay_end_epoch: usize,
    pub floor: f64,
    pub stop_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            peak: 2e-4,
            decay_end_epoch: 100,
            floor: 4e-5,
            stop_epoch: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Fraction of training pieces held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            schedule: LrSchedule::default(),
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-9,
            clip_norm: 1.0,
            validation_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub length: usize,
    pub top_k: usize,
    /// Resampling attempts before giving up on a piece.
    pub retries: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            length: 512,
            top_k: 8,
            retries: 8,
        }
    }
}

/// Everything a pipeline run needs, read from one JSON file. Missing
/// sections take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub quantization: QuantizationConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub prior_train: TrainConfig,
    pub generation: GenerationConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.model.validate()?;
        cfg.prior.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_tiny_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        PriorConfig::tiny().validate().unwrap();
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"model": {"d": 64, "heads": 4}}"#).unwrap();
        assert_eq!(cfg.model.d, 64);
        assert_eq!(cfg.model.codebook_size, 512);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn beta_ramp() {
        let m = ModelConfig::default();
        assert_eq!(m.beta_at(1), 0.0);
        assert!((m.beta_at(11) - 0.1).abs() < 1e-12);
        assert_eq!(m.beta_at(21), 0.2);
        assert_eq!(m.beta_at(150), 0.2);
    }
}
