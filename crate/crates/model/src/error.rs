use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Core(#[from] xmvae_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sub-token {column}: id {id} outside a vocabulary of {size}")]
    IdOutOfVocabulary { column: usize, id: u32, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
    },

    #[error("learning-rate schedule ends at epoch {stop}, asked for {epoch}")]
    ScheduleEnded { epoch: usize, stop: usize },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
