//! Tensor containers: tensorization schemes, dense tensors and tensor trains.

pub mod dense;
pub mod io;
pub mod scheme;
pub mod train;

pub use dense::{DenseTensor, DEFAULT_DENSE_GUARD};
pub use scheme::{Ordering, TensorizationScheme};
pub use train::{Core, TTOperator, TTVector, TensorTrain};
