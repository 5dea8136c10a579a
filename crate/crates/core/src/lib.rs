pub mod audio;
mod container;
pub mod error;

pub use error::{Error, Result};
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod pipeline;
pub mod quantizer;
pub mod synth;
pub mod units;
pub mod vocoder;
