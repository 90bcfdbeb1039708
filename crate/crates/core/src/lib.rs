//! Manifold IMU preintegration with log-depth cumulative operators, batched
//! covariance propagation, pluggable correction models, trajectory metrics
//! and an IMU/GPS pose-graph optimizer.
//!
//! Error-state ordering everywhere is `[δφ, δv, δp]`, with rotations
//! perturbed on the right (`R ⊕ δφ = R·exp(δφ)`).

pub mod bench;
pub mod correction;
pub mod covariance;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pgo;
pub mod preintegration;
pub mod scan;
pub mod sim;
pub mod so3;

pub use error::{Error, Result};
pub use preintegration::{ImuSample, ImuSequence, Increments, NavState};
pub use so3::Rotation;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat9 = nalgebra::SMatrix<f64, 9, 9>;
pub type Vec9 = nalgebra::SVector<f64, 9>;

/// Default gravity, world z-up (m/s²).
pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);
