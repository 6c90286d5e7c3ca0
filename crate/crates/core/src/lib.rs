//! Detect-and-denoise defense workbench for observation-space attacks on
//! continuous-control policies.

pub mod adaptive;
pub mod attack;
pub mod diff;
pub mod env;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod policy;
pub mod scalar;
pub mod shield;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the reinforcement-learning pipeline.
pub type Real = f64;
pub type Graph64 = diff::Graph<f64>;
pub type Graph32 = diff::Graph<f32>;
pub type Mlp64 = diff::Mlp<f64>;
pub type Mlp32 = diff::Mlp<f32>;
pub type GruCell64 = diff::GruCellParams<f64>;
pub type GruCell32 = diff::GruCellParams<f32>;
