pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod domainshift;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod quantum;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod tta;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases used by the binaries.
pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParamStore = checkpoint::ParamStore<f64>;
pub type Model = nets::Model<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = nets::Model<f32>;
