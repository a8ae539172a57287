//! Differentiable particle filters with normalising-flow models and online
//! learning over sliding windows.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod flows;
pub mod learn;
pub mod oracle;
pub mod pf;
pub mod scalar;
pub mod ssm;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParameterStore64 = autodiff::ParameterStore<f64>;
pub type ParticleEnsemble64 = pf::ParticleEnsemble<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParameterStore32 = autodiff::ParameterStore<f32>;
