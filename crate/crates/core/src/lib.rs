//! Multi-level in situ weight generation for convolutional networks.
//!
//! A convolution kernel `W` (`C_o x C_i k^2`) is regenerated on the fly from
//! two levels of low-rank factors: every generated kernel slice is
//! `U_i W_i^b` (a `C_i x B_i` coefficient times a `B_i x k^2` channel basis),
//! and the `B_c` generated slices are mixed into all `C_o` kernels by a
//! `C_o x B_c` coefficient `V`. Factors can be held at low, mixed bitwidths.
//!
//! Modules:
//! - [`tensor`]: dense matrices, GEMM, im2col convolution, Jacobi SVD
//! - [`generator`]: the factor set, kernel generation and its gradients,
//!   compression ratios, factor container format
//! - [`quant`]: fake quantization, straight-through gradients, precision bounds
//! - [`train`]: projection/SVD init, distillation loss, orthogonality penalty,
//!   RAdam, the 3-layer CNN and its trainer
//! - [`cost`]: latency model of a photonic generator and weight-load savings
//! - [`explore`]: kernel correlation metric, grid search, Pareto front
//! - [`data`]: IDX dataset loading and deterministic batching

pub mod cost;
pub mod data;
pub mod error;
pub mod explore;
pub mod generator;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DenseMatrix, Tensor4D};
