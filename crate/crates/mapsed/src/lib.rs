//! Spatiotemporal sparse-event forecasting over (time, category, 2D-space)
//! count tensors: a multi-axis attention encoder/decoder trained with a
//! reconstruction objective plus a Frobenius-norm contrastive objective,
//! with data ingestion, baselines, metrics, and probe experiments.

pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod mab;
pub mod model;
pub mod opt;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ConvParams, Tensor};
