pub mod autodiff;
pub mod bench;
pub mod check;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod head;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
