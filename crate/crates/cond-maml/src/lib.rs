#![forbid(unsafe_code)]

//! Gradient-based meta-learning with an explicit handle on inner-loop curvature.
//!
//! The crate trains models that adapt to new tasks in a handful of gradient
//! steps (the MAML objective) while penalizing the spread of the inner-loop
//! Gauss-Newton spectrum, so that adapted solutions sit in well-conditioned
//! regions of the loss landscape. Everything runs on a small tape-based
//! reverse-mode autodiff engine that can differentiate its own backward
//! passes, which is what makes the penalty trainable: eigenvalues of the
//! per-task Jacobian Gram matrix are graph nodes like any other.
//!
//! Module map:
//!
//! - [`autodiff`] — dense f64 tensors and the append-only gradient tape.
//! - [`linalg`] — cyclic Jacobi eigendecomposition, differentiable
//!   eigenvalue extraction, condition numbers.
//! - [`models`] — small ReLU MLPs with named, grouped parameter sets.
//! - [`conditioning`] — residual reformulation of the support loss, Jacobian
//!   Gram assembly, and the log-eigenvalue variance penalty.
//! - [`metalearn`] — inner-loop adaptation, the combined task objective, and
//!   the outer meta-update.
//! - [`tasks`] — synthetic Gaussian episodes, CSV-backed episodes with
//!   class-disjoint splits, and the quadratic descent demo.
//! - [`harness`] — training driver, parallel evaluation, condition traces,
//!   checkpoints, and the flat key=value run configuration.
//!
//! The `examples/` directory is the guided tour: each example is a runnable
//! walkthrough of one capability, from raw higher-order gradients up to a full
//! conditioned training run. The `cond-maml` binary wraps the harness in a
//! small CLI (`train`, `eval`, `demo-quadratic`, `trace`).

pub mod autodiff;
pub mod conditioning;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metalearn;
pub mod models;
pub mod tasks;

#[cfg(test)]
pub(crate) mod testutil;

pub use autodiff::{Graph, NodeId, Tensor};
pub use error::{Error, Result};
