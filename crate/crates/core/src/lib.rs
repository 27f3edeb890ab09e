//! Autoregressive diffusion transformers over continuous tokens.

pub mod ardit;
pub mod autodiff;
pub mod blockplan;
pub mod checkpoint;
pub mod dmd;
pub mod nets;
pub mod error;
pub mod flowmatch;
pub mod harness;
pub mod latentae;
pub mod optim;
pub mod params;
pub mod positions;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
