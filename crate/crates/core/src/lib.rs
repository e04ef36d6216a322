//! Small area estimation toolkit: complex-survey designs over synthetic finite
//! populations, design-based direct and indirect estimators, and Bayesian
//! spatial smoothing (area-level smoothed direct, unit-level beta-binomial and
//! Matérn Gaussian-process models) with aggregation and model assessment.
//!
//! The crate is `no_std` and needs only `alloc`. Enable the `parallel`
//! feature to run MCMC chains and cross-validation refits on a rayon pool.
#![no_std]
#[cfg(any(test, feature = "std"))]
extern crate std;
extern crate alloc;

mod error;
mod prelude;

pub mod arealevel;
pub mod assess;
pub mod direct;
pub mod indirect;
pub mod math;
pub mod mcmc;
pub mod population;
pub mod rng;
pub mod sampling;
pub mod spatial;
pub mod unitlevel;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
