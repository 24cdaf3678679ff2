//! Output-space tokenization for dense vision tasks.
//!
//! Depth maps and instance masks are compressed into short sequences of
//! discrete codebook tokens by small VQ-VAEs; an autoregressive
//! encoder-decoder predicts those sequences from images. Soft tokens
//! (probability-weighted codebook embeddings) are supported both when
//! feeding the next decoding step and when detokenizing.

pub mod error;
pub mod tensor;
pub mod tokenizer;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod seq;
pub mod solver;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, ParamStore, Tensor, Var};
pub use vq::Codebook;
