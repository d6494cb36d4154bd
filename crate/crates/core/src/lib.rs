//! Numerical toolkit for flow-based diffusion transformers.
//!
//! The crate is organised by mechanism:
//!
//! * [`numkernel`] dense tensors and the handful of kernels everything else uses
//! * [`rope`] multi-axis rotary embeddings and resolution-extrapolation strategies
//! * [`dit`] the Next-DiT block (GQA, QK-Norm, sandwich norm, tanh-gated AdaLN-Zero)
//! * [`sampler`] time schedules, explicit Runge-Kutta solvers, and trajectory diagnostics
//! * [`contextdrop`] time-aware key/value pooling
//! * [`partitioner`] any-resolution patch partitioning, padding and masks
//! * [`flowlab`] flow-matching training, analytic Gaussian flows and distribution metrics
//!
//! [`autograd`] is the tape-based reverse-mode engine the network forward pass is written on.

pub mod autograd;
pub mod contextdrop;
pub mod dit;
pub mod error;
pub mod flowlab;
pub mod numkernel;
pub mod partitioner;
pub mod rope;
pub mod sampler;

pub use error::{Error, Result};
pub use numkernel::{DType, Tensor};
