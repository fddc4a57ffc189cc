//! Transformer layers read as steps of an ODE integrator.
//!
//! A standard (sequential) transformer layer applies an attention residual and
//! then an MLP residual. The parallel layer adds both branch outputs to the
//! same input at once, a single forward-Euler step of
//! `dX/dt = F(X) + G(X, X)`. This crate provides both layers, RK4 integration
//! of the same vector field, depth-wise weight sharing, and the small
//! reverse-mode autodiff and training harness needed to check all of it.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod integrators;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;

/// Seeded RNG used everywhere randomness appears.
pub type Rng = rand_chacha::ChaCha8Rng;
