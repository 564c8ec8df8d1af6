//! Point-cloud semantic segmentation with twin deformable point convolutions.

pub mod config;
pub mod cydconv;
pub mod data;
mod deform;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod gradcheck;
pub mod infer;
pub mod net;
pub mod spdconv;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
