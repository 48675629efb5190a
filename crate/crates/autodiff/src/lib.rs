//! Reverse-mode automatic differentiation over dense row-major arrays of
//! rank at most four.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a root walks the record once in reverse and leaves
//! a gradient on every reachable node. Graphs are generic over the element
//! type: `f64` for gradient checking, `f32` for training.

mod backward;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use error::{AdError, Result};
pub use graph::{CustomOp, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
