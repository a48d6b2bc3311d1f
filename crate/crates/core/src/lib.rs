pub mod augment;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Graph, Real, Tensor, Var};
