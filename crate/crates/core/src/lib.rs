//! Learned video compression with per-pixel separable kernel synthesis.

pub mod autograd;
pub mod cli;
pub mod bitstream;
pub mod codec_nets;
pub mod entropy;
pub mod error;
pub mod evalkit;
pub mod gop;
pub mod interpolation;
pub mod kernel_synthesis;
pub mod media_io;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
