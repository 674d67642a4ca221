//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values are stored as `f64` but, under the default [`Precision::F32`] mode,
//! every produced element is rounded to the nearest `f32`. Switching the
//! calling thread to [`Precision::F64`] (see [`precision::scoped`]) gives full
//! double precision, which the finite-difference verification suites rely on.
//!
//! A [`Graph`] records operations in creation order. [`Graph::backward`]
//! walks that record in reverse, accumulating gradients additively into every
//! node that requires them.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
pub mod precision;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use precision::Precision;
pub use tensor::Tensor;
