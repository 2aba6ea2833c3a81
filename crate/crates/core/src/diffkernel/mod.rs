//! Minimal reverse-mode dense-computation kernel.
//!
//! Define-by-run: every training step builds a fresh [`Tape`], runs the
//! forward ops eagerly, and calls [`Tape::backward`] once on the scalar
//! loss. All tensors are 64-bit and two-dimensional (batch x features);
//! scalars are 1x1. Every op checks its output for NaN/Inf and fails
//! instead of propagating.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;


pub use checkpoint::{load_checkpoint, save_checkpoint, NamedTensor};
pub use optim::{optimizer_step, OptimizerConfig};
pub use params::{ParamId, ParamSet, Parameter};
pub use tape::{BnState, NodeId, Tape};
