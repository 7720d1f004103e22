//! Transductive sparse representation-based classification.
//!
//! The model is a convolutional autoencoder with a structured sparse-coding
//! layer in the middle: test embeddings are reconstructed as sparse linear
//! combinations of training embeddings, the whole stack is trained jointly,
//! and the learned coefficients classify the test set by the minimum
//! class-restricted residual rule. Classical SRC on raw pixels is included
//! as a baseline, together with a five-fold evaluation harness.

pub mod autodiff;
pub mod classic;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod pipeline;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{DsrcError, Result};
pub use tensor::{Parameter, Tensor};
