pub mod autograd;
pub mod distributions;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod training;
pub mod data;
pub mod model;

pub use error::{Error, Result};
