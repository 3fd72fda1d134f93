//! Ensemble Kalman filtering with a learned correction for small ensembles.
//!
//! A small ensemble (`N = 7` by default) runs the stochastic EnKF; a fully
//! connected network predicts the shift that moves its analysis mean onto the
//! analysis mean a large ensemble (`N = 100`) would have produced, and that
//! shift is added to every member before the next forecast.
//!
//! Modules, bottom-up:
//! - [`numerics`]: random streams, Gaussian draws, covariance, SPD solve
//! - [`dynamics`]: Lorenz-63 / Lorenz-96 and forward-Euler window propagation
//! - [`enkf`]: measurement synthesis, forecast, analysis, filter driver
//! - [`fcnn`]: the correction network, its training and file format
//! - [`pipeline`]: twin-experiment orchestration and the ε(t) metric
//! - [`cli`]: configuration, artifacts and the command-line commands

pub mod cli;
pub mod dynamics;
pub mod enkf;
pub mod error;
pub mod fcnn;
pub mod io;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
