//! Unsupervised shadow removal with target-consistent dual GANs.
//!
//! Two independently initialized generator–discriminator pairs are trained
//! on unpaired shadow / shadow-free images; a target-consistency term ties
//! the two restored outputs together, and a small classifier picks the more
//! plausible restoration at inference time.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
mod gemm;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
