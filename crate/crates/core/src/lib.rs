pub mod audio;
pub mod defense;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod identity;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod robustness;

pub use error::{Error, Result};
