//! Multimodal variational autoencoder with a continuous-normalizing-flow posterior.

pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod flows;
pub mod model;
pub mod nn;
pub mod objective;
pub mod poe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
