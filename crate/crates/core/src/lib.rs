pub mod autograd;
pub mod data;
pub mod error;
pub mod geometry;
pub mod image;
pub mod matching;
pub mod matrix;
pub mod net;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tensor::{Real, Tensor};
