//! Desk-scale knowledge distillation under a hard teacher-inference budget.
//!
//! The crate provides:
//!
//! - [`math`]: numerically stable softmax/KL/comparison primitives and a
//!   small dense eigensolver for the representation analyses.
//! - [`losses`]: the distillation objectives (comparative, KD, relational,
//!   mixup-fixed, hint-based), each returning a scalar and its analytic
//!   gradient with respect to the student's inputs.
//! - [`teacher`]: a budget-ledgered, persistently cached teacher oracle.
//! - [`sampler`]: comparative-group generation with an enumeration oracle.
//! - [`dataset`]: synthetic Gaussian-mixture generation and a CSV loader.
//! - [`training`]: minimal MLPs with hand-written backpropagation, the SGD
//!   optimizer, and the full early-stopping/LR-decay training protocol.
//! - [`analysis`]: correlation-matrix matching and representation-flatness
//!   curves, plus cross-seed aggregation.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod rng;
pub mod sampler;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngStream;
