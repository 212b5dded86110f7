//! Deterministic federated-learning simulation in which every client keeps a
//! private visual prompt that is trained alternately with a shared,
//! server-aggregated backbone, alongside FedAvg, FedProx, Local, FedPer and
//! FedRep baselines.

pub mod analysis;
pub mod data;
pub mod engine;
pub mod error;
pub mod nn;
pub mod numeric;
pub mod prompting;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numeric::Tensor<f32>;
pub type Tensor64 = numeric::Tensor<f64>;
pub type Network32 = numeric::Network<f32>;
pub type Network64 = numeric::Network<f64>;
pub type ParameterVector32 = numeric::ParameterVector<f32>;
pub type ParameterVector64 = numeric::ParameterVector<f64>;
pub type PromptState32 = prompting::PromptState<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type ExperimentRun32 = engine::ExperimentRun<f32>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
