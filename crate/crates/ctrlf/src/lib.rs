//! CTRL-F: a hybrid convolution/transformer image classifier.
//!
//! The crate bundles a small reverse-mode autodiff tensor library, the
//! MBConv convolution path, the dual-branch cross-attention transformer
//! module, two knowledge-fusion heads, an analytic parameter/FLOP cost
//! engine, a dataset pipeline, and the training harness behind the `ctrlf`
//! binary.

pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, TensorData, TensorId};
