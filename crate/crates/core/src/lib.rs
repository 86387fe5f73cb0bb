//! Any-modality anomaly detection.

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod inp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod score;
pub mod tensorgrad;
pub mod train;
pub mod verify;

pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
pub use scalar::{DType, Scalar};
pub use tensorgrad::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
