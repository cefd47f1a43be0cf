//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! The engine is deliberately small: a closed set of operations over
//! row-major tensors, 64-bit floats everywhere, and a single broadcast rule
//! (scalar against tensor). What it gives up in generality it returns in
//! auditability — every backward rule is a few lines, and the backward pass
//! itself emits ordinary graph nodes, so gradients can be differentiated
//! again. That gradient-of-graph property is load-bearing for the rest of the
//! crate: meta-gradients flow through inner-loop updates, and the conditioning
//! penalty differentiates through per-sample gradients twice.

mod graph;
mod tensor;

pub use graph::{Graph, Node, NodeId, Op};
pub use tensor::Tensor;
