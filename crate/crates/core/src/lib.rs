//! Local-global attention networks for multi-lead ECG classification.
//!
//! The crate is self-contained: a small dense tensor type with reverse-mode
//! differentiation, the convolutional and attention layers, the full
//! classifier, dataset tooling and the training loop.

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autograd::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Precision, Tensor};
