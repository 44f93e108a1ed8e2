pub mod error;
pub mod tensor;
pub mod types;
pub mod model;
pub mod decoder;
pub mod crosstube;
pub mod matchloss;
pub mod metrics;
pub mod synth;
pub mod tracker;
pub mod train;
pub mod dataio;
pub mod config;
pub mod gradcheck;
pub mod commands;

pub use error::{Error, Result};
