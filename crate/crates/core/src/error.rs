use std::path::PathBuf;

use crate::grammar::Diagnostic;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid note: {0}")]
    InvalidNote(String),

    #[error("cannot estimate tempo: {0}")]
    Tempo(String),

    #[error("token {index}: {field} is IGNORE on a note token")]
    IgnoreId { index: usize, field: &'static str },

    #[error("sub-token id out of range: {0}")]
    IdOutOfRange(String),

    #[error("grammar violation: {0}")]
    Grammar(Diagnostic),

    #[error("{path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("{0}")]
    Corpus(String),

    #[error("token dump line {line}: {msg}")]
    Dump { line: usize, msg: String },

    #[error("midi: {0}")]
    Midi(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
