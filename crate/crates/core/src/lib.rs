pub mod app;
pub mod dataio;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sim;
pub mod vecchia;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
