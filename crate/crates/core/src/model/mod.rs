//! Decoder-only transformer language model, decoding, and checkpoints.

mod checkpoint;
mod config;
mod sampling;
mod tokenizer;
mod transformer;

pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use config::{DecodingMode, DecodingParams, ModelConfig};
pub use sampling::{argmax, choose_token, nucleus_filter};
pub use tokenizer::Tokenizer;
pub use transformer::{Bound, LanguageModel};
