//! Numerical core: dense `f64` tensors, a tape-based reverse-mode autodiff
//! graph, and the small linear-algebra kernels (jittered Cholesky,
//! triangular solves, power iteration) the models are built from.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod special;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BinaryOp, Gradients, Graph, ReduceOp, UnaryOp, Var};
pub use linalg::{cholesky, power_iteration, Cholesky, PowerIteration};
pub use tensor::{broadcast_shape, Tensor};
