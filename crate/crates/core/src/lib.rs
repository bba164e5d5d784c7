//! Event-level contextualization of video clip embeddings.
//!
//! A small backbone embeds each clip; a transformer encoder reads windows of
//! consecutive event embeddings and is pretrained by predicting masked
//! events against a queue of distractors. Downstream probes measure verb
//! and relation recognition on a synthetic narrative corpus.

pub mod autograd;
pub mod data;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
