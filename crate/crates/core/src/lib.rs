//! Mixup-based distance learning for few-shot GAN training.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod mixup;
pub mod models;
pub mod optim;
pub mod similarity;
pub mod tensor;
pub mod train;

pub use error::{MixdlError, Result};
