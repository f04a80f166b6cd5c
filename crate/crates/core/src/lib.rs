//! Federated training with mutual-information losses and fairness metrics.

pub mod bench;
pub mod calibration;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod fairness;
pub mod mi_losses;
pub mod models;
pub mod ndmath;
pub mod seeding;

pub use error::{Error, Result};

/// Scalar used by the experiment pipeline.
pub type Real = f32;
pub type Tensor32 = ndmath::Tensor<f32>;
pub type Tensor64 = ndmath::Tensor<f64>;
pub type Params32 = ndmath::Params<f32>;
