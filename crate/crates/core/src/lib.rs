pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod infer;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
