pub mod augment;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod model_aug;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
