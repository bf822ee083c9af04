//! A desk-scale laboratory for parameter-efficient fine-tuning of linear
//! layers. The centerpiece is a diagonal-scaling adapter that reshapes a
//! frozen weight matrix `W0` into `diag(a) * W0 * diag(b)` with only
//! `n + m` trainable parameters, alongside LoRA, full fine-tuning, and
//! frozen baselines, synthetic teacher tasks where the update is exactly
//! representable, and a singular-value analysis of the weight updates each
//! method produces.
//!
//! All numerics are plain `f64` on row-major buffers, single-threaded
//! within a training run, so every result is bitwise reproducible from a
//! seed. Parallelism only ever appears across independent (adapter, seed)
//! cells in the experiment harness.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rank;
pub mod rng;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, Spectrum};
