pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ode;
pub mod oracles;
pub mod sampler;
pub mod training;

pub use error::{Error, ErrorClass, Result};
