//! Dense-tensor numerics with tape-based reverse-mode automatic differentiation.
//!
//! The crate is deliberately small: row-major dense tensors over an `f32`/`f64`
//! scalar, a [`Tape`] that records primitive operations during the forward
//! pass, and a reverse sweep that accumulates exact gradients for every leaf.
//! [`finite_diff_grad`] provides the independent central-difference oracle the
//! test suites check analytic gradients against.
//!
//! Conventions:
//! - Tensors are row-major; a rank-0 tensor holds a single scalar.
//! - `conv2d` computes cross-correlation (no kernel flip).
//! - Non-finite values are rejected at op boundaries in debug and test builds;
//!   release builds skip the scan.
//!
//! A tape and the values it owns are confined to one thread. Independent tapes
//! may run concurrently; they share nothing.

mod error;
mod fd;
mod scalar;
mod tape;
mod tensor;

pub use error::TensorError;
pub use fd::finite_diff_grad;
pub use scalar::Scalar;
pub use tape::{Gradients, Padding, Tape, Var};
pub use tensor::Tensor;

/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tape.
pub type Tape32 = Tape<f32>;
/// Double-precision tape.
pub type Tape64 = Tape<f64>;

pub type Result<T> = std::result::Result<T, TensorError>;
