//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value lives on a [`Graph`] and is addressed through a cheap [`Var`]
//! handle. Gradients are themselves built out of graph operations, so calling
//! [`grad`] with `create_graph = true` yields gradient variables that can be
//! differentiated again. That is what makes unrolled inner-loop
//! differentiation (gradient of a function of a gradient step) possible.
//!
//! Everything is two-dimensional; scalars are `1 x 1` matrices.

mod graph;
mod ops;
mod sparse;

pub use graph::{grad, Graph, Var};
pub use sparse::SparseMatrix;

/// Dense matrix type used for every value on the tape.
pub type Mat = ndarray::Array2<f64>;
