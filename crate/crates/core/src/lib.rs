//! Parallel diffusion sampling by Picard iteration, with Picard consistency
//! training and model switching.

mod codec;
pub mod denoiser;
pub mod error;
pub mod newton;
pub mod optim;
pub mod pct;
pub mod picard;
pub mod solver;
pub mod switching;
pub mod tensor;

pub use error::{Error, Result};
