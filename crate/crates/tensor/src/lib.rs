//! A compact reverse-mode automatic differentiation engine over `f64`
//! arrays.
//!
//! Values are [`Var`]s: immutable, reference counted nodes that remember the
//! operation that produced them. [`backward`] collects gradients for leaves;
//! [`grad`] returns gradients for arbitrary nodes and can record the
//! gradient computation itself, which is what gradient penalties need.
//!
//! Every built-in operation differentiates through other built-in
//! operations, so gradients of gradients are available throughout.

pub mod gradcheck;
pub mod init;
mod ops;
pub mod optim;
mod param;
mod var;

pub use ops::{bilinear_matrix, broadcast_shape, pool2_matrix};
pub use param::{join, Module, Param};
pub use var::{backward, grad, is_grad_enabled, no_grad, with_grad_mode, Array, Backward, Gradients, Var};
