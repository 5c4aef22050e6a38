pub mod bnn;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gan;
pub mod harness;
pub mod nn;
pub mod privacy;
pub mod tasks;

pub use error::{Error, Result};
