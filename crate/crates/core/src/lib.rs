pub mod analysis;
pub mod autodiff;
pub mod cli;
mod csvio;
pub mod data;
pub mod error;
pub mod hypersphere;
pub mod layers;
pub mod model;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
