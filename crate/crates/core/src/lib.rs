pub mod autodiff;
pub mod cancel;
pub mod error;
pub mod executor;
pub mod graph;
pub mod kernel;
pub mod persistence;
pub mod placement;
pub mod runtime;
pub mod state;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Shape, SparsePair, Tensor};
