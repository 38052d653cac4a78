//! Quantized tensor-train (QTT) compression, arithmetic and inversion of
//! dense operators arising from 3D volume integral equations.

pub mod arith;
pub mod compress;
pub mod cross;
pub mod error;
pub mod inverse;
pub mod kernels;
pub mod krylov;
pub mod linalg;
pub mod tensor;

pub use error::{QttError, Result};
pub use tensor::{Core, DenseTensor, TTOperator, TTVector, TensorTrain, TensorizationScheme};
