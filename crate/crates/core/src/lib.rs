//! Video saliency prediction with two decoder experts over a shared,
//! frozen spatiotemporal feature extractor, trained in two stages and fused
//! at inference.
//!
//! The numeric core is generic over [`Scalar`]; `f32` is used for training
//! and `f64` for gradient checks.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Expert32 = experts::ExpertModel<f32>;
pub type Expert64 = experts::ExpertModel<f64>;
