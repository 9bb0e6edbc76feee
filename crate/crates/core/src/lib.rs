//! Post-training quantization with reorder-based channel clustering.

pub mod bits;
pub mod bundle;
pub mod calib;
pub mod cluster;
pub mod error;
pub mod fusion;
pub mod memmodel;
pub mod pipeline;
pub mod qlinear;
pub mod qtransformer;
pub mod quant;
pub mod strategy;
pub mod tensor;
pub mod testkit;

pub use error::{Error, Result};
