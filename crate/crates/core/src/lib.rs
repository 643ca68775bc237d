//! Federated graph unlearning over a simulated FedAvg federation.

pub mod adversarial;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod gnn;
pub mod graph;
pub mod linalg;
pub mod pipeline;
pub mod prototype;
pub mod scalar;

pub use error::{FguError, Result};
pub use scalar::Scalar;

pub type Graph64 = graph::Graph<f64>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type Params64 = gnn::ModelParams<f64>;
pub type State64 = federation::FederationState<f64>;
