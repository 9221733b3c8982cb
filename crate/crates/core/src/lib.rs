pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod par;
pub mod rng;
pub mod train;

pub use data::Dataset;
pub use error::{Error, Result};
pub use matrix::{elementwise, matmul, DenseMatrix, ElementwiseOp};
pub use model::{ForwardTrace, Mode, ModelConfig, ModelParams};
pub use rng::RandomSource;
