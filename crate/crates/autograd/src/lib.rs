//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Graph`] tape, a handful of
//! elementwise/reduction ops, 2-D convolution, bilinear warping and resizing,
//! named [`ParamStore`]s, and an [`AdamW`] optimizer. Everything runs in
//! double precision so finite-difference checks are meaningful.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, Grads, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{ShapeError, Tensor};
