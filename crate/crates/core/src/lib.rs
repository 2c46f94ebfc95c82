//! 2D pose-graph smoothing with orientation vectors.
//!
//! Rotations are carried as 2-vectors `(cos θ, sin θ)` kept at unit length by
//! Lagrange constraints, and the whole graph is optimized with a Newton method
//! on the exact bordered Hessian of the Lagrangian.

pub mod assembly;
pub mod cli;
pub mod constraints;
pub mod costs;
pub mod derivcheck;
pub mod error;
pub mod fd_oracle;
pub mod graph;
pub mod linsolve;
pub mod orvec;
pub mod sim;
pub mod solver;

pub use error::{Error, MeasurementId, Result};
