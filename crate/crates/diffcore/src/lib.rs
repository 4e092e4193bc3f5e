//! Reverse-mode automatic differentiation on a flat tape, generic over the
//! scalar type (`f32` for training, `f64` for finite-difference oracles),
//! plus the small set of neural layers, the Adam optimizer, and checkpoint
//! IO used by the signaling-game agents.
//!
//! The design point is many short-lived graphs: a training step builds a
//! fresh [`Graph`] per episode, binds the shared [`ParamSet`] through a
//! [`Binding`], runs one backward sweep, and folds gradients into a
//! [`GradBuffer`]. Everything is deterministic for a fixed seed — node order
//! fixes accumulation order, and no hash-map iteration touches numerics.

pub mod check;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use check::{grad_check, GradCheck};
pub use error::DiffError;
pub use graph::{Binding, CustomOp, Graph, NodeId, OpCtx};
pub use optim::{Adam, AdamConfig};
pub use params::{GradBuffer, Param, ParamId, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
