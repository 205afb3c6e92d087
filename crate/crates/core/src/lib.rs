//! Autoencoding variational autoencoders on a small reverse-mode autodiff core.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases at the crate root fix `f64`, which the rest of the workspace uses.

pub mod data;
pub mod discrete_vm;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod linalg;
pub mod nets;
pub mod objectives;
pub mod ppca;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type DiagGaussian = gaussian::DiagGaussian<f64>;
pub type FullGaussian = gaussian::FullGaussian<f64>;
pub type Encoder = nets::Encoder<f64>;
pub type Decoder = nets::Decoder<f64>;
pub type ModelPair = nets::ModelPair<f64>;
pub type Adam = nets::Adam<f64>;
pub type PpcaModel = ppca::PpcaModel<f64>;
pub type TabularModel = discrete_vm::TabularModel<f64>;
pub type Dataset = data::Dataset<f64>;
pub type LinearProbe = eval::LinearProbe<f64>;
