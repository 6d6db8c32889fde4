pub mod check;
pub mod config;
pub mod cost_filter;
pub mod cost_volume;
pub mod error;
pub mod features;
pub mod model;
pub mod nn;
pub mod objective;
pub mod refiner;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
