//! Pivot-driven dense exploration for group-relative policy optimization,
//! on synthetic token trees small enough to check against exact enumeration.

pub mod env;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
