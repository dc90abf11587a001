//! PDE discovery from noisy, sparsely sampled grid data.
//!
//! The pipeline smooths a field with Savitzky-Golay filters, fits a residual
//! gated surrogate network to estimate derivatives, and searches for the
//! right-hand side with island-model genetic programming.

pub mod denoise;
pub mod error;
pub mod evolve;
pub mod expr;
pub mod features;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod simulate;
pub mod surrogate;
pub mod field;
pub mod rng;

pub use error::{Error, Result, Stage};
pub use field::{Axis, Field, SampleSet};
