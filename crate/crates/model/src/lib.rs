//! Two-branch expressive performance model with a discrete score latent
//! and a continuous performance latent, plus the latent prior, training
//! loops and sampling pipelines.

pub mod config;
pub mod decoder;
pub mod embed;
pub mod encoder;
pub mod checkpoint;
pub mod error;
pub mod inference;
pub mod loss;
pub mod optim;
pub mod nn;
pub mod params;
pub mod prior;
pub mod schedule;
pub mod train;
pub mod vq;
pub mod xmvae;

pub use config::{ExperimentConfig, GenerationConfig, LrSchedule, ModelConfig, PriorConfig, TrainConfig};
pub use error::{Error, Result};
pub use vq::Codebook;
pub use xmvae::{Inputs, Noise, Quantize, Xmvae};
