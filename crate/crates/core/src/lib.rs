//! Character-level question-answer matching with crossed transformer encoders.
//!
//! The crate carries its own reverse-mode autodiff ([`tape`]) over small dense
//! tensors, the encoder and head architectures, triplet training with AdamW,
//! ranking evaluation, and the `qamatch` command-line tool.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use text::{EncodedSequence, Vocabulary};
