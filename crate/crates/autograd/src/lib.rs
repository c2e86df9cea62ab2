//! Tape-based reverse-mode automatic differentiation over dense `NCHW`
//! tensors.
//!
//! The engine covers exactly the operator set needed by small
//! convolutional GANs: strided convolution and its transpose, dense
//! layers, batch/instance normalization, the usual pointwise
//! nonlinearities and a handful of fused loss reductions. Every operator
//! is generic over [`Scalar`] so that the same network code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants ([`Graph::input`]) or differentiable parameters
//! ([`Graph::param`]); [`Graph::backward`] returns a [`Gradients`] table
//! indexed by [`Var`].

mod conv;
mod error;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use conv::ConvGeometry;
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NormStats, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
