//! Middle-out sequence decoding with dual self-attention.

pub mod attention;
pub mod batching;
pub mod caption;
pub mod checkpoint;
pub mod config;
pub mod decoding;
pub mod denoise;
pub mod experiments;
mod error;
pub mod gradcheck;
pub mod jsonl;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::Error;
pub use params::{AdamState, ParamId, ParameterStore};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
