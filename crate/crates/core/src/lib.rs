pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod seed;
pub mod style;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
