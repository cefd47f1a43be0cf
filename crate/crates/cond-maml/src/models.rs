//! Small ReLU MLPs with named, grouped parameters.
//!
//! Parameters live in two layers of representation. [`ParamValues`] is the
//! persistent form — plain tensors keyed by name and group, what checkpoints
//! store and meta-updates produce. [`ParamSet`] is the in-graph form — the
//! same entries bound to differentiable leaf nodes of some [`Graph`], or to
//! intermediate nodes once the inner loop starts producing updated parameters.
//!
//! Groups split a network at its head: every layer but the last belongs to
//! `emb` (the embedding trunk), the final linear layer to `cls` (the
//! classifier). Conditioning penalties are typically computed over `cls`
//! alone, which keeps the Jacobian small while the penalty still shapes the
//! whole network through second-order terms.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Parameter group tag: the embedding trunk or the classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Emb,
    Cls,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Emb => "emb",
            Group::Cls => "cls",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Group> {
        match s {
            "emb" => Ok(Group::Emb),
            "cls" => Ok(Group::Cls),
            other => Err(Error::InvalidArgument(format!(
                "unknown parameter group {other:?} (expected \"emb\" or \"cls\")"
            ))),
        }
    }
}

/// Architecture of an MLP: input width, at least one hidden layer, and the
/// class count. The seed fixes the initial parameter draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MLPConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
}

impl MLPConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument(
                "mlp config: input_dim must be positive".to_string(),
            ));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "mlp config: need at least one hidden layer with positive width, got {:?}",
                self.hidden_dims
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "mlp config: n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Layer widths from input to logits.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.n_classes);
        w
    }
}

/// Persistent parameter values: ordered `(name, group, tensor)` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamValues {
    pub config: MLPConfig,
    pub entries: Vec<(String, Group, Tensor)>,
}

impl ParamValues {
    /// Glorot-uniform weights (`|w| <= sqrt(6 / (fan_in + fan_out))`),
    /// all-zero biases. Deterministic for a given generator state.
    pub fn init(config: &MLPConfig, rng: &mut ChaCha8Rng) -> Result<ParamValues> {
        config.validate()?;
        let widths = config.widths();
        let layers = widths.len() - 1;
        let mut entries = Vec::with_capacity(layers * 2);
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let group = if l + 1 == layers { Group::Cls } else { Group::Emb };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            entries.push((
                format!("w{}", l + 1),
                group,
                Tensor::from_raw(vec![fan_in, fan_out], w),
            ));
            entries.push((format!("b{}", l + 1), group, Tensor::zeros(&[fan_out])));
        }
        Ok(ParamValues {
            config: config.clone(),
            entries,
        })
    }

    /// All values concatenated in entry order, row-major within each entry.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, _, t)| t.data().iter().copied())
            .collect()
    }

    /// Rebuilds a value set with the same layout from a flat vector produced
    /// by [`ParamValues::flatten`]. Exact round-trip: no arithmetic touches
    /// the values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamValues> {
        let expected: usize = self.entries.iter().map(|(_, _, t)| t.numel()).sum();
        if flat.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "unflatten: expected {expected} values, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, group, t)| {
                let chunk = &flat[offset..offset + t.numel()];
                offset += t.numel();
                Ok((
                    name.clone(),
                    *group,
                    Tensor::new(t.shape().to_vec(), chunk.to_vec())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamValues {
            config: self.config.clone(),
            entries,
        })
    }
}

/// One in-graph parameter: name, group, the node holding its current value.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub node: NodeId,
}

/// An ordered set of in-graph parameters plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub layout: MLPConfig,
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    /// Binds persistent values into `g` as differentiable leaves.
    pub fn bind(g: &mut Graph, values: &ParamValues) -> ParamSet {
        let entries = values
            .entries
            .iter()
            .map(|(name, group, tensor)| ParamEntry {
                name: name.clone(),
                group: *group,
                node: g.parameter(tensor.clone()),
            })
            .collect();
        ParamSet {
            layout: values.config.clone(),
            entries,
        }
    }

    /// A set with the same names/groups/layout but new nodes — how inner-loop
    /// updates produce the next parameter stage without leaving the graph.
    pub fn with_nodes(&self, nodes: Vec<NodeId>) -> ParamSet {
        assert_eq!(nodes.len(), self.entries.len(), "with_nodes: arity mismatch");
        let entries = self
            .entries
            .iter()
            .zip(nodes)
            .map(|(e, node)| ParamEntry {
                name: e.name.clone(),
                group: e.group,
                node,
            })
            .collect();
        ParamSet {
            layout: self.layout.clone(),
            entries,
        }
    }

    /// Constructs a set from explicit entries. Intended for objectives whose
    /// parameters are not MLP-shaped (the layout then only records nominal
    /// architecture metadata).
    pub fn from_entries(layout: MLPConfig, entries: Vec<ParamEntry>) -> ParamSet {
        ParamSet { layout, entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.node).collect()
    }

    /// Entries belonging to any of `groups`, in entry order.
    pub fn select(&self, groups: &BTreeSet<Group>) -> Vec<&ParamEntry> {
        self.entries
            .iter()
            .filter(|e| groups.contains(&e.group))
            .collect()
    }

    /// Snapshot of the current node values as persistent parameters.
    pub fn values(&self, g: &Graph) -> ParamValues {
        let entries = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.group, g.value(e.node).clone()))
            .collect();
        ParamValues {
            config: self.layout.clone(),
            entries,
        }
    }
}

/// Runs the MLP on a batch `x` of shape `[b, input_dim]`, returning the
/// logits node of shape `[b, n_classes]`.
///
/// Bias broadcast is expressed inside the op set: the rank-1 bias is viewed
/// as a row and replicated over the batch with a ones-column matmul.
pub fn forward(g: &mut Graph, params: &ParamSet, x: &Tensor) -> Result<NodeId> {
    if x.shape().len() != 2 || x.shape()[1] != params.layout.input_dim {
        return Err(Error::Domain {
            op: "forward",
            msg: format!(
                "input shape {:?} does not match input_dim {}",
                x.shape(),
                params.layout.input_dim
            ),
        });
    }
    let batch = x.shape()[0];
    let layers = params.entries.len() / 2;
    let ones_col = g.constant(Tensor::filled(&[batch, 1], 1.0));

    let mut h = g.constant(x.clone());
    for l in 0..layers {
        let w = params.entries[2 * l].node;
        let b = params.entries[2 * l + 1].node;
        let out_width = g.value(b).numel();

        let hw = g.matmul(h, w)?;
        let b_row = g.reshape(b, &[1, out_width])?;
        let b_bc = g.matmul(ones_col, b_row)?;
        h = g.add(hw, b_bc)?;
        if l + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Per-sample softmax cross-entropy of a logits node against integer labels;
/// shape `[b]`.
pub fn per_sample_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.softmax_cross_entropy(logits, labels)
}

/// Mean cross-entropy over a batch, as a scalar node.
pub fn mean_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let per = per_sample_loss(g, logits, labels)?;
    g.mean(per)
}

/// Fraction of rows whose argmax matches the label. Ties resolve to the
/// lowest class index, deterministically.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    debug_assert_eq!(rows, labels.len());
    let mut correct = 0usize;
    for r in 0..rows {
        let mut best = 0usize;
        for c in 1..cols {
            if logits.at(r, c) > logits.at(r, best) {
                best = c;
            }
        }
        if best == labels[r] {
            correct += 1;
        }
    }
    correct as f64 / rows as f64
}
