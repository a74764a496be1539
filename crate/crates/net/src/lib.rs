//! Spatio-temporal forecasting networks built around one idea: a small
//! network over an object's *static spatial attributes* generates parameter
//! pieces of the *temporal* network that forecasts that object's series.
//! Objects with similar attributes end up with similar temporal dynamics;
//! objects with different attributes get genuinely different models, all
//! trained jointly from the forecasting loss.
//!
//! The crate provides:
//!
//! - [`layers`]: the building blocks (embedding trunk, generation heads,
//!   scaled dense / recurrent / convolutional layers, parameter accounting);
//! - [`models`]: assembled forecasting models (recurrent and grid
//!   convolutional, plain and parameter-generating variants) with
//!   checkpointing;
//! - [`data`]: dataset container, CSV persistence, a synthetic generator
//!   with controllable spatial→temporal coupling, windowing, normalization;
//! - [`training`]: loss, optimizers, the training loop, evaluation metrics,
//!   and a finite-difference gradient audit;
//! - [`experiment`]: config-driven end-to-end runs and model comparisons;
//! - [`verify`]: a self-check suite asserting the library's algebraic
//!   identities and gradient correctness at runtime.
//!
//! All numerics run on an `f64` tape from the companion tensor crate.

pub mod data;
pub mod error;
pub mod experiment;
pub mod init;
pub mod layers;
pub mod models;
pub mod training;
pub mod verify;

pub use error::NetError;

/// Scalar type used throughout the networks.
pub type Real = f64;
/// Dense tensor over [`Real`].
pub type Tensor = hyperst_tensor::Tensor64;
/// Gradient tape over [`Real`].
pub type Tape = hyperst_tensor::Tape64;

pub use hyperst_tensor::{finite_diff_grad, Gradients, Padding, Var};

pub type Result<T> = std::result::Result<T, NetError>;
