//! The gradient tape: an append-only arena of nodes with eager forward
//! evaluation and a backward pass that emits new nodes.
//!
//! Design rules, enforced here and relied on everywhere else:
//!
//! - the op set is closed: every backward rule is expressed in terms of the
//!   same ops (plus constant leaves), so a gradient is itself differentiable;
//! - broadcasting exists only between a one-element tensor and a tensor;
//!   everything else must match shapes exactly;
//! - appending nodes never mutates existing node values;
//! - any op that produces NaN or an infinity fails at the op, not downstream.
//!
//! There is no reciprocal op. Backward rules that need `1/x` emit
//! `exp(-log(x))`, which is always applied to strictly positive forward
//! values (`log` and `sqrt` restrict their domains up front).

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Index of a node in its [`Graph`]. Ids are dense and creation-ordered,
/// which the backward pass uses as a topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag stored on every node. Structural attributes (transpose
/// flags, reduction axis, labels, frozen eigenvectors) live on the tag so the
/// backward pass needs nothing beyond the node itself.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add,
    Mul,
    MatMul {
        transpose_lhs: bool,
        transpose_rhs: bool,
    },
    Relu,
    Exp,
    Log,
    Sqrt,
    /// `axis: None` reduces to a scalar; `Some(0)`/`Some(1)` reduce one axis
    /// of a rank-2 tensor to a rank-1 tensor.
    Sum {
        axis: Option<usize>,
    },
    Mean,
    /// Per-row cross-entropy of logits against fixed integer labels.
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    ClampFloor {
        floor: f64,
    },
    /// Population variance over all elements.
    Variance,
    Scale {
        factor: f64,
    },
    Reshape,
    /// Rows of equal-length rank-1 tensors stacked into a matrix.
    Stack,
    /// Ascending eigenvalues of a symmetric matrix. Carries the eigenvector
    /// matrix (columns, same order) frozen at forward time; eigenvectors are
    /// not differentiable through this op.
    Eigvals {
        eigenvectors: Tensor,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Sum { .. } => "sum",
            Op::Mean => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::ClampFloor { .. } => "clamp-floor",
            Op::Variance => "variance",
            Op::Scale { .. } => "scale",
            Op::Reshape => "reshape",
            Op::Stack => "stack",
            Op::Eigvals { .. } => "eigvals",
        }
    }
}

/// One recorded operation: its forward value, tag, parents, and whether a
/// differentiable leaf is reachable from it.
#[derive(Clone, Debug)]
pub struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Append-only computation tape. Single-threaded by design; concurrency in
/// this crate comes from building independent graphs on separate threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The single element of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    // ---- leaves ------------------------------------------------------------

    /// Inserts a leaf holding `value`. Differentiable leaves are the targets
    /// gradients are taken against; non-differentiable leaves are constants.
    pub fn leaf(&mut self, value: Tensor, differentiable: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: differentiable,
        });
        id
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A non-differentiable rank-0 scalar leaf.
    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn emit(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        value.ensure_finite(op.name())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Ok(id)
    }

    // ---- elementwise and broadcast ops --------------------------------------

    /// Elementwise addition; one side may be a one-element tensor, which is
    /// broadcast against the other.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            broadcast_zip("add", ta, tb, |x, y| x + y)?
        };
        self.emit(Op::Add, vec![a, b], value)
    }

    /// Elementwise multiplication with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            broadcast_zip("mul", ta, tb, |x, y| x * y)?
        };
        self.emit(Op::Mul, vec![a, b], value)
    }

    /// Multiplication by a compile-time-fixed scalar constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::Domain {
                op: "scale",
                msg: format!("factor {factor} is not finite"),
            });
        }
        let v = self.nodes[x.0].value.clone();
        let data = v.data().iter().map(|e| e * factor).collect();
        self.emit(
            Op::Scale { factor },
            vec![x],
            Tensor::from_raw(v.shape().to_vec(), data),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| e.max(0.0)).collect();
        let value = Tensor::from_raw(v.shape().to_vec(), data);
        self.emit(Op::Relu, vec![x], value)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|e| e.exp()).collect();
        let value = Tensor::from_raw(v.shape().to_vec(), data);
        self.emit(Op::Exp, vec![x], value)
    }

    /// Natural logarithm; requires all elements strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if let Some(bad) = v.data().iter().find(|e| **e <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let data = v.data().iter().map(|e| e.ln()).collect();
        let value = Tensor::from_raw(v.shape().to_vec(), data);
        self.emit(Op::Log, vec![x], value)
    }

    /// Square root; requires all elements non-negative. The derivative is
    /// singular at zero, so taking gradients through `sqrt(0)` is an error —
    /// callers forming residuals avoid it by flooring losses first.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if let Some(bad) = v.data().iter().find(|e| **e < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("negative input {bad}"),
            });
        }
        let data = v.data().iter().map(|e| e.sqrt()).collect();
        let value = Tensor::from_raw(v.shape().to_vec(), data);
        self.emit(Op::Sqrt, vec![x], value)
    }

    /// Elementwise `max(x, floor)`. Gradient is 1 above the floor and 0 at or
    /// below it.
    pub fn clamp_floor(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        if !floor.is_finite() {
            return Err(Error::Domain {
                op: "clamp-floor",
                msg: format!("floor {floor} is not finite"),
            });
        }
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| e.max(floor)).collect();
        let value = Tensor::from_raw(v.shape().to_vec(), data);
        self.emit(Op::ClampFloor { floor }, vec![x], value)
    }

    // ---- matrix ops ----------------------------------------------------------

    /// `a @ b` for rank-2 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand. The
    /// flags are part of the op, which keeps the op set closed under
    /// differentiation without a separate transpose node.
    pub fn matmul_flags(
        &mut self,
        a: NodeId,
        b: NodeId,
        transpose_lhs: bool,
        transpose_rhs: bool,
    ) -> Result<NodeId> {
        let value = {
            let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            matmul_value("matmul", ta, tb, transpose_lhs, transpose_rhs)?
        };
        self.emit(
            Op::MatMul {
                transpose_lhs,
                transpose_rhs,
            },
            vec![a, b],
            value,
        )
    }

    // ---- reductions ----------------------------------------------------------

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        self.emit(Op::Sum { axis: None }, vec![x], Tensor::scalar(total))
    }

    /// Sum along one axis of a rank-2 tensor: axis 0 collapses rows (giving a
    /// length-`cols` tensor), axis 1 collapses columns.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = {
            let v = &self.nodes[x.0].value;
            if v.shape().len() != 2 {
                return Err(Error::Domain {
                    op: "sum",
                    msg: format!("axis reduction needs a rank-2 input, got {:?}", v.shape()),
                });
            }
            if axis > 1 {
                return Err(Error::Domain {
                    op: "sum",
                    msg: format!("axis {axis} out of range for rank 2"),
                });
            }
            let (rows, cols) = (v.shape()[0], v.shape()[1]);
            if axis == 1 {
                let data = (0..rows)
                    .map(|r| (0..cols).map(|c| v.at(r, c)).sum())
                    .collect();
                Tensor::from_raw(vec![rows], data)
            } else {
                let data = (0..cols)
                    .map(|c| (0..rows).map(|r| v.at(r, c)).sum())
                    .collect();
                Tensor::from_raw(vec![cols], data)
            }
        };
        self.emit(Op::Sum { axis: Some(axis) }, vec![x], value)
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let mean = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.emit(Op::Mean, vec![x], Tensor::scalar(mean))
    }

    /// Population variance (divide by n) of all elements, as a rank-0 scalar.
    pub fn variance(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let n = v.numel() as f64;
        let mean = v.data().iter().sum::<f64>() / n;
        let var = v.data().iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        self.emit(Op::Variance, vec![x], Tensor::scalar(var))
    }

    // ---- classification loss --------------------------------------------------

    /// Per-row softmax cross-entropy of `logits` (`[b, c]`) against integer
    /// `labels` (length `b`, each in `0..c`), returning a length-`b` tensor.
    /// Computed with the usual max-shift for stability.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let value = {
            let v = &self.nodes[logits.0].value;
            if v.shape().len() != 2 {
                return Err(Error::Domain {
                    op: "softmax-cross-entropy",
                    msg: format!("logits must be rank 2, got {:?}", v.shape()),
                });
            }
            let (rows, cols) = (v.shape()[0], v.shape()[1]);
            if labels.len() != rows {
                return Err(Error::Domain {
                    op: "softmax-cross-entropy",
                    msg: format!("{} labels for {rows} rows", labels.len()),
                });
            }
            if let Some(bad) = labels.iter().find(|l| **l >= cols) {
                return Err(Error::Domain {
                    op: "softmax-cross-entropy",
                    msg: format!("label {bad} out of range for {cols} classes"),
                });
            }
            let data = (0..rows)
                .map(|r| {
                    let m = (0..cols).map(|c| v.at(r, c)).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + (0..cols).map(|c| (v.at(r, c) - m).exp()).sum::<f64>().ln();
                    lse - v.at(r, labels[r])
                })
                .collect();
            Tensor::from_raw(vec![rows], data)
        };
        self.emit(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            value,
        )
    }

    // ---- structure ------------------------------------------------------------

    /// Same data, new shape. The element count must be unchanged.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::Domain {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", v.shape(), shape),
            });
        }
        let value = Tensor::from_raw(shape.to_vec(), v.data().to_vec());
        self.emit(Op::Reshape, vec![x], value)
    }

    /// Stacks n rank-1 tensors of equal length m into an `[n, m]` matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Domain {
                op: "stack",
                msg: "no rows given".to_string(),
            });
        }
        let width = {
            let first = &self.nodes[rows[0].0].value;
            if first.shape().len() != 1 {
                return Err(Error::Domain {
                    op: "stack",
                    msg: format!("rows must be rank 1, got {:?}", first.shape()),
                });
            }
            first.numel()
        };
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let v = &self.nodes[r.0].value;
            if v.shape() != [width] {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: vec![width],
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_raw(vec![rows.len(), width], data);
        self.emit(Op::Stack, rows.to_vec(), value)
    }

    /// Inserts an eigenvalue node: `values` are the ascending eigenvalues of
    /// the symmetric matrix held by `matrix`, `eigenvectors` the matching
    /// eigenvector columns. Called by the linear-algebra layer, which is the
    /// only place decompositions are computed.
    pub(crate) fn eigvals_node(
        &mut self,
        matrix: NodeId,
        values: Tensor,
        eigenvectors: Tensor,
    ) -> Result<NodeId> {
        self.emit(Op::Eigvals { eigenvectors }, vec![matrix], values)
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse-mode gradient of a one-element `output` with respect to each
    /// node in `wrt`, in order.
    ///
    /// With `create_graph` set, the returned nodes stay connected to the
    /// recording and can be differentiated again; without it they are constant
    /// leaves and the scratch nodes the sweep produced are discarded.
    ///
    /// Every `wrt` node must be differentiable. A `wrt` node the output does
    /// not depend on yields a zero tensor of its shape rather than an error.
    pub fn gradient(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<Vec<NodeId>> {
        if self.nodes[output.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "gradient: output must be a one-element tensor, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        for w in wrt {
            if !self.nodes[w.0].requires_grad {
                return Err(Error::InvalidArgument(format!(
                    "gradient: wrt node {} is not differentiable",
                    w.0
                )));
            }
        }

        let mark = self.nodes.len();
        let mut adjoint: Vec<Option<NodeId>> = vec![None; mark];
        let seed_shape = self.nodes[output.0].value.shape().to_vec();
        let seed = self.constant(Tensor::filled(&seed_shape, 1.0));
        adjoint[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let Some(g) = adjoint[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_step(id, g, &mut adjoint)?;
        }

        let gathered: Vec<Option<NodeId>> = wrt.iter().map(|w| adjoint[w.0]).collect();
        let mut out = Vec::with_capacity(wrt.len());
        if create_graph {
            for (w, a) in wrt.iter().zip(gathered) {
                out.push(match a {
                    Some(n) => n,
                    None => {
                        let shape = self.nodes[w.0].value.shape().to_vec();
                        self.constant(Tensor::zeros(&shape))
                    }
                });
            }
        } else {
            // Detach: keep only the values, drop every scratch node the sweep
            // emitted, and hand back constants.
            let values: Vec<Tensor> = wrt
                .iter()
                .zip(gathered)
                .map(|(w, a)| match a {
                    Some(n) => self.nodes[n.0].value.clone(),
                    None => Tensor::zeros(self.nodes[w.0].value.shape()),
                })
                .collect();
            self.nodes.truncate(mark);
            out.extend(values.into_iter().map(|v| self.constant(v)));
        }
        Ok(out)
    }

    fn accumulate(
        &mut self,
        adjoint: &mut [Option<NodeId>],
        parent: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        if !self.nodes[parent.0].requires_grad {
            return Ok(());
        }
        adjoint[parent.0] = Some(match adjoint[parent.0] {
            Some(prev) => self.add(prev, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    /// Emits the adjoint contributions of node `id` into its parents, given
    /// the node's own accumulated adjoint `g` (same shape as its value).
    fn backward_step(
        &mut self,
        id: usize,
        g: NodeId,
        adjoint: &mut [Option<NodeId>],
    ) -> Result<()> {
        let op = self.nodes[id].op.clone();
        let parents = self.nodes[id].parents.clone();
        match op {
            Op::Leaf => {}

            Op::Add => {
                let (a, b) = (parents[0], parents[1]);
                for p in [a, b] {
                    let contrib = self.sum_to_shape(g, p)?;
                    self.accumulate(adjoint, p, contrib)?;
                }
            }

            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                let ga = self.mul(g, b)?;
                let ga = self.sum_to_shape(ga, a)?;
                self.accumulate(adjoint, a, ga)?;
                let gb = self.mul(g, a)?;
                let gb = self.sum_to_shape(gb, b)?;
                self.accumulate(adjoint, b, gb)?;
            }

            Op::MatMul {
                transpose_lhs: tl,
                transpose_rhs: tr,
            } => {
                let (a, b) = (parents[0], parents[1]);
                let (ga, gb) = match (tl, tr) {
                    (false, false) => (
                        self.matmul_flags(g, b, false, true)?,
                        self.matmul_flags(a, g, true, false)?,
                    ),
                    (true, false) => (
                        self.matmul_flags(b, g, false, true)?,
                        self.matmul_flags(a, g, false, false)?,
                    ),
                    (false, true) => (
                        self.matmul_flags(g, b, false, false)?,
                        self.matmul_flags(g, a, true, false)?,
                    ),
                    (true, true) => (
                        self.matmul_flags(b, g, true, true)?,
                        self.matmul_flags(g, a, true, true)?,
                    ),
                };
                self.accumulate(adjoint, a, ga)?;
                self.accumulate(adjoint, b, gb)?;
            }

            Op::Relu => {
                let x = parents[0];
                let mask = {
                    let v = &self.nodes[x.0].value;
                    let data = v.data().iter().map(|&e| if e > 0.0 { 1.0 } else { 0.0 });
                    Tensor::from_raw(v.shape().to_vec(), data.collect())
                };
                let mask = self.constant(mask);
                let gx = self.mul(g, mask)?;
                self.accumulate(adjoint, x, gx)?;
            }

            Op::Exp => {
                // d exp(x)/dx = exp(x), which is this node's own value.
                let gx = self.mul(g, NodeId(id))?;
                self.accumulate(adjoint, parents[0], gx)?;
            }

            Op::Log => {
                // 1/x as exp(-log x); this node already is log x.
                let neg = self.scale(NodeId(id), -1.0)?;
                let recip = self.exp(neg)?;
                let gx = self.mul(g, recip)?;
                self.accumulate(adjoint, parents[0], gx)?;
            }

            Op::Sqrt => {
                let y = NodeId(id);
                if self.nodes[id].value.data().iter().any(|&e| e == 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        msg: "gradient is singular at zero".to_string(),
                    });
                }
                let log_y = self.log(y)?;
                let neg = self.scale(log_y, -1.0)?;
                let recip = self.exp(neg)?;
                let half = self.scale(recip, 0.5)?;
                let gx = self.mul(g, half)?;
                self.accumulate(adjoint, parents[0], gx)?;
            }

            Op::Sum { axis } => {
                let x = parents[0];
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let gx = match axis {
                    None => {
                        let ones = self.constant(Tensor::filled(&xshape, 1.0));
                        self.mul(ones, g)?
                    }
                    Some(1) => {
                        let (rows, cols) = (xshape[0], xshape[1]);
                        let gcol = self.reshape(g, &[rows, 1])?;
                        let ones = self.constant(Tensor::filled(&[1, cols], 1.0));
                        self.matmul(gcol, ones)?
                    }
                    Some(_) => {
                        let (rows, cols) = (xshape[0], xshape[1]);
                        let grow = self.reshape(g, &[1, cols])?;
                        let ones = self.constant(Tensor::filled(&[rows, 1], 1.0));
                        self.matmul(ones, grow)?
                    }
                };
                self.accumulate(adjoint, x, gx)?;
            }

            Op::Mean => {
                let x = parents[0];
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let n = self.nodes[x.0].value.numel() as f64;
                let w = self.constant(Tensor::filled(&xshape, 1.0 / n));
                let gx = self.mul(w, g)?;
                self.accumulate(adjoint, x, gx)?;
            }

            Op::Variance => {
                // d var/dx_i = 2 (x_i - mean) / n.
                let x = parents[0];
                let n = self.nodes[x.0].value.numel() as f64;
                let mx = self.mean(x)?;
                let neg_mx = self.scale(mx, -1.0)?;
                let centered = self.add(x, neg_mx)?;
                let coeff = self.scale(centered, 2.0 / n)?;
                let gx = self.mul(coeff, g)?;
                self.accumulate(adjoint, x, gx)?;
            }

            Op::SoftmaxCrossEntropy { labels } => {
                // grad_z[i, c] = g_i * (softmax(z_i)_c - 1{c == labels_i}),
                // with softmax rebuilt from the logits so second-order terms
                // flow. The row max is frozen as a constant; the derivative of
                // the shifted form is exact for any fixed shift.
                let z = parents[0];
                let (rows, cols) = {
                    let s = self.nodes[z.0].value.shape();
                    (s[0], s[1])
                };
                let (rowmax, onehot) = {
                    let v = &self.nodes[z.0].value;
                    let mut m = Vec::with_capacity(rows);
                    for r in 0..rows {
                        m.push((0..cols).map(|c| v.at(r, c)).fold(f64::NEG_INFINITY, f64::max));
                    }
                    let mut oh = vec![0.0; rows * cols];
                    for (r, &l) in labels.iter().enumerate() {
                        oh[r * cols + l] = 1.0;
                    }
                    (
                        Tensor::from_raw(vec![rows, 1], m),
                        Tensor::from_raw(vec![rows, cols], oh),
                    )
                };
                let rowmax = self.constant(rowmax);
                let onehot = self.constant(onehot);
                let ones_row = self.constant(Tensor::filled(&[1, cols], 1.0));

                let shift = self.matmul(rowmax, ones_row)?;
                let neg_shift = self.scale(shift, -1.0)?;
                let zm = self.add(z, neg_shift)?;
                let e = self.exp(zm)?;
                let s = self.sum_axis(e, 1)?;
                let s_col = self.reshape(s, &[rows, 1])?;
                let log_s = self.log(s_col)?;
                let neg_log_s = self.scale(log_s, -1.0)?;
                let recip_s = self.exp(neg_log_s)?;
                let recip_bc = self.matmul(recip_s, ones_row)?;
                let p = self.mul(e, recip_bc)?;

                let neg_onehot = self.scale(onehot, -1.0)?;
                let diff = self.add(p, neg_onehot)?;
                let g_col = self.reshape(g, &[rows, 1])?;
                let g_bc = self.matmul(g_col, ones_row)?;
                let gz = self.mul(g_bc, diff)?;
                self.accumulate(adjoint, z, gz)?;
            }

            Op::ClampFloor { floor } => {
                let x = parents[0];
                let mask = {
                    let v = &self.nodes[x.0].value;
                    let data = v
                        .data()
                        .iter()
                        .map(|&e| if e > floor { 1.0 } else { 0.0 })
                        .collect();
                    Tensor::from_raw(v.shape().to_vec(), data)
                };
                let mask = self.constant(mask);
                let gx = self.mul(g, mask)?;
                self.accumulate(adjoint, x, gx)?;
            }

            Op::Scale { factor } => {
                let gx = self.scale(g, factor)?;
                self.accumulate(adjoint, parents[0], gx)?;
            }

            Op::Reshape => {
                let x = parents[0];
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let gx = self.reshape(g, &xshape)?;
                self.accumulate(adjoint, x, gx)?;
            }

            Op::Stack => {
                let n = parents.len();
                let width = self.nodes[parents[0].0].value.numel();
                for (i, p) in parents.iter().enumerate() {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    let mut sel = vec![0.0; n];
                    sel[i] = 1.0;
                    let sel = self.constant(Tensor::from_raw(vec![1, n], sel));
                    let row = self.matmul(sel, g)?;
                    let gp = self.reshape(row, &[width])?;
                    self.accumulate(adjoint, *p, gp)?;
                }
            }

            Op::Eigvals { eigenvectors } => {
                // d lambda_i / dA = v_i v_i^T with the eigenvectors frozen:
                // grad_A = V diag(g) V^T.
                let a = parents[0];
                let n = self.nodes[id].value.numel();
                let v = self.constant(eigenvectors);
                let eye = self.constant(Tensor::eye(n));
                let ones_col = self.constant(Tensor::filled(&[n, 1], 1.0));
                let g_row = self.reshape(g, &[1, n])?;
                let g_rows = self.matmul(ones_col, g_row)?;
                let diag_g = self.mul(eye, g_rows)?;
                let vd = self.matmul(v, diag_g)?;
                let ga = self.matmul_flags(vd, v, false, true)?;
                self.accumulate(adjoint, a, ga)?;
            }
        }
        Ok(())
    }

    /// Reduces an adjoint to the shape of `target` when that parent entered a
    /// broadcast op as the one-element side; otherwise passes it through.
    fn sum_to_shape(&mut self, g: NodeId, target: NodeId) -> Result<NodeId> {
        let tshape = self.nodes[target.0].value.shape().to_vec();
        let gshape = self.nodes[g.0].value.shape().to_vec();
        if gshape == tshape {
            return Ok(g);
        }
        debug_assert_eq!(self.nodes[target.0].value.numel(), 1);
        let total = self.sum(g)?;
        self.reshape(total, &tshape)
    }
}

/// Elementwise combination under the scalar↔tensor broadcast policy.
fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::from_raw(a.shape().to_vec(), data))
    } else if a.is_scalar() {
        let s = a.data()[0];
        let data = b.data().iter().map(|y| f(s, *y)).collect();
        Ok(Tensor::from_raw(b.shape().to_vec(), data))
    } else if b.is_scalar() {
        let s = b.data()[0];
        let data = a.data().iter().map(|x| f(*x, s)).collect();
        Ok(Tensor::from_raw(a.shape().to_vec(), data))
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn matmul_value(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (am, ak) = effective_dims(a.shape(), ta);
    let (bk, bn) = effective_dims(b.shape(), tb);
    if ak != bk {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![am, ak],
            rhs: vec![bk, bn],
        });
    }
    let mut data = vec![0.0; am * bn];
    for i in 0..am {
        for k in 0..ak {
            let x = if ta { a.at(k, i) } else { a.at(i, k) };
            if x == 0.0 {
                continue;
            }
            for j in 0..bn {
                let y = if tb { b.at(j, k) } else { b.at(k, j) };
                data[i * bn + j] += x * y;
            }
        }
    }
    Ok(Tensor::from_raw(vec![am, bn], data))
}

fn effective_dims(shape: &[usize], transpose: bool) -> (usize, usize) {
    if transpose {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}
