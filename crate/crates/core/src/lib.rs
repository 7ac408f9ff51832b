pub mod cli;
pub mod csvio;
pub mod dynamics;
pub mod error;
pub mod landscape;
pub mod learning;
pub mod operator;
pub mod presets;
pub mod rng;
pub mod tomography;
pub mod verification;

pub use error::{Error, Result};
