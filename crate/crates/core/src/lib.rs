//! Adaptive hybrid mechanistic/data-driven models and nonlinear model
//! predictive control for a binary distillation column.

pub mod column;
pub mod error;
pub mod harness;
pub mod hybrid;
pub mod integrator;
pub mod learner;
pub mod lhs;
pub mod nmpc;
pub mod pipeline;
pub mod surrogate;

pub use error::{Error, Result};
