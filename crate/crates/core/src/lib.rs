//! Time-optimal bang-bang control of the heat equation on the unit square.
//!
//! The minimal time is found as the root of a scalar value function `delta`,
//! each evaluation of which solves a convex minimal-distance problem with an
//! accelerated conditional gradient method.

pub mod analysis;
pub mod config;
pub mod control;
pub mod distance;
pub mod error;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod parabolic;
pub mod problem;
pub mod study;
pub mod time_solver;

pub use error::{Error, Result};
