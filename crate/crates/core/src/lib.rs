//! Expressive compound-word (ECP) representation of piano performances.
//!
//! A performance is a sequence of compound tokens. Each step carries four
//! score sub-tokens (family, beat position, pitch, duration) and four
//! performance sub-tokens (beat period, velocity, timing, articulation)
//! quantized from real-valued expressive parameters.
//!
//! This crate holds everything that does not need a neural network: the
//! quantization tables, the codec and its grammar, corpus ingestion and
//! segmentation, MIDI I/O, the objective metrics and pianoroll plots.

pub mod codec;
pub mod corpus;
pub mod dataset;
pub mod dump;
pub mod error;
pub mod expressive;
pub mod grammar;
pub mod metrics;
pub mod midi;
pub mod notes;
pub mod pianoroll;
pub mod quantize;
pub mod synthetic;
pub mod token;

pub use codec::{decode_performance, decode_score, encode_aligned, encode_score, Timeline};
pub use error::{Error, Result};
pub use expressive::{compute_expressive_params, ExpressiveParams};
pub use grammar::{validate_grammar, validate_score_grammar, Diagnostic, Rule};
pub use notes::{AlignedNote, PerformedNote, ScoreNote};
pub use quantize::{PerfBins, QuantizationConfig, QuantizationSpec};
pub use token::{BeatPosition, CompoundToken, EcpSequence, Family, Vocabulary};
