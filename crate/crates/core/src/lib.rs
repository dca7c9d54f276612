pub mod analysis;
pub mod autodiff;
pub mod birwkv;
pub mod cli;
pub mod codec;
pub mod coder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rcm;
pub mod tensor;
pub mod training;
pub mod transform;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
