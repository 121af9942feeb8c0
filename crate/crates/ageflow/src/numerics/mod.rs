//! Tensor kernels, RNG, Adam, and the finite-difference oracle shared by
//! every other module.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_update, AdamOptimizer, AdamState};
pub use param::{Param, ParamRefs};
pub use rng::Rng;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
