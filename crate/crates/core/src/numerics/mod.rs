//! Random streams, dense matrices and the small linear-algebra kernels used
//! by the filter.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{covariance, ensemble_anomalies, spd_solve, JITTER_RELATIVE, MAX_JITTER_ATTEMPTS};
pub use matrix::Matrix;
pub use rng::{gaussian_sample, stream_index, GaussianSpec, RngStream, StreamPurpose, ALGORITHM_ID};
