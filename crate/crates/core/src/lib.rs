//! Numerical laboratory for residual networks with a scaled parametric branch,
//! `h_l = φ(h_{l−1} + τ W_l h_{l−1})`.
//!
//! The core math (tensors, model, gradients, training) is generic over the
//! scalar type via [`Real`]; the Monte Carlo checks in [`theory`] and the
//! aliases below fix it to `f64`.

pub mod data;
pub mod error;
pub mod grad;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod snapshot;
pub mod spectral;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Arch, NetworkConfig, SignMask};
pub use rng::SeedSpec;
pub use scalar::Real;

pub type Matrix = tensor::Mat<f64>;
pub type Network = model::NetworkParams<f64>;
pub type Trace = model::ForwardTrace<f64>;
pub type Data = data::Dataset<f64>;
pub type Grads = grad::Gradients<f64>;
pub type Loss = grad::LossReport<f64>;

pub type Matrix32 = tensor::Mat<f32>;
pub type Network32 = model::NetworkParams<f32>;
