pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use mask::Mask;
pub use tensor::Tensor;
