pub mod agent;
pub mod autograd;
pub mod data;
pub mod diffusion;
pub mod distillation;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rig;
pub mod scalar;
pub mod streaming;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Serving and training precision.
pub type Real = f32;
/// Gradient-check precision.
pub type Real64 = f64;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Params32 = params::ParamStore<f32>;
pub type Params64 = params::ParamStore<f64>;
pub type Session32 = inference::Session<f32>;
pub type Agent32 = agent::Agent<f32>;
pub type DistillState32 = distillation::DistillState<f32>;
pub type DistillState64 = distillation::DistillState<f64>;
