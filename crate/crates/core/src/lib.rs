pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
