//! Learned lossy image codec with a context-based non-local entropy model.
//!
//! The pipeline: an analysis transform maps an image to a latent, a
//! trainable quantizer turns the latent into a block of center indices,
//! an autoregressive entropy model predicts a probability table for every
//! code from already decoded codes, and a range coder writes the stream.
//! Decoding runs the entropy model group by group along anti-diagonals
//! and finishes with the synthesis transform.

pub mod autodiff;
pub mod ccn;
pub mod codec;
pub mod coder;
pub mod entropy;
pub mod error;
pub mod image_io;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod nonlocal;
pub mod params;
pub mod quantizer;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use quantizer::CodeBlock;
pub use tensor::Tensor;
