pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod model;
pub mod moe;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
