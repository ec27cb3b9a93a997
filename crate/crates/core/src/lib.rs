//! Dataset distillation into pixels or into the latent spaces of a frozen,
//! differentiable generator.

pub mod container;
pub mod datakit;
pub mod dsa;
pub mod engine;
pub mod error;
pub mod evalharness;
pub mod experts;
pub mod genweights;
pub mod microstyle;
pub mod nets;
pub mod objectives;
pub mod parallel;
pub mod scalar;
pub mod selftest;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{backward, vjp, GradientSet, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
