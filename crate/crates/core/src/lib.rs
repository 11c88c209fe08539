//! Hybrid multiphysics solver kit: a finite-element mechanics solver coupled,
//! step by step, to a GRU-branch deep operator network that predicts the
//! second field (temperature or pore pressure), plus the fully coupled
//! monolithic solvers used for data generation and ground truth.

pub mod autodiff;
pub mod error;
pub mod mesh;
pub mod fem;
pub mod sparse;

pub use error::{CoreError, Result};
