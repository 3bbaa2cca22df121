pub mod encoder;
pub mod error;
pub mod harness;
pub mod interference;
pub mod moe;
pub mod params;
pub mod routing;
pub mod tensor;
pub mod unified;

pub use error::{Error, Result};
