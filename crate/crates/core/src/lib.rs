//! Few-shot nested NER: span encoder, contrastive training and
//! similarity-based inference. See the `examples/` directory for usage.

pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod embedkit;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod protocol;
pub mod synth;

pub use error::{Error, Result};
