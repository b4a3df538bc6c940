//! Weighted-denoising training objectives for flow matching.
//!
//! Every training objective is written as a weighted regression of a denoiser
//! `D(x_t, t)` onto the clean sample `x_1`, where the weighting `w(t)` and the
//! parametrization class (clean-image, velocity or noise prediction) are
//! chosen independently. The crate bundles the objective, closed-form
//! Gaussian oracles, a controlled-dimension Fourier dataset, two small
//! architectures, an ODE sampler, denoising metrics and an experiment
//! harness.

pub mod datasets;
pub mod error;
pub mod fields;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod sampler;

pub use error::{Error, Result};
