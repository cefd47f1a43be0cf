//! Residual reformulation, per-sample Jacobians, and the conditioning loss.
//!
//! The pipeline turns a support batch into a penalty on curvature spread:
//!
//! 1. [`residuals`] rewrites per-sample losses as least-squares residuals
//!    `r_i = sqrt(max(l_i, floor) / |D|)`, so that the summed squares recover
//!    the floored mean loss.
//! 2. [`jacobian_blocks`] differentiates each residual against a parameter
//!    subset, one gradient sweep per sample, keeping the results in-graph so
//!    the eventual penalty can reach every upstream parameter.
//! 3. [`gram_of_blocks`] forms the `|D| x |D|` Gram product `J Jᵀ`, which
//!    shares its nonzero spectrum with the Gauss-Newton product `Jᵀ J` while
//!    staying small when the subset is large.
//! 4. [`condition_loss`] penalizes the population variance of the base-10
//!    log eigenvalues, averaged over the recorded inner steps. The log makes
//!    the penalty scale-invariant: multiplying the whole spectrum by a
//!    constant shifts every log equally and variance ignores shifts.
//!
//! Floors appear twice, both to keep derivatives finite rather than to change
//! the objective: [`DEFAULT_LOSS_FLOOR`] keeps the square root away from its
//! singularity at zero loss, and [`DEFAULT_EIG_FLOOR`] keeps the log away
//! from numerically-zero trailing eigenvalues of a rank-deficient Gram
//! matrix. Both clamps pass zero gradient through a floored entry.

use std::collections::BTreeSet;
use std::f64::consts::LN_10;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::models::{self, Group, ParamSet};

/// Floor applied to per-sample losses before the square root.
pub const DEFAULT_LOSS_FLOOR: f64 = 1e-8;

/// Floor applied to Gram eigenvalues before the logarithm.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;

/// Per-sample residual vector for one support batch: a rank-1 node of length
/// `support_size` whose entries are all at least `sqrt(loss_floor /
/// support_size)`.
#[derive(Clone, Debug)]
pub struct ResidualVector {
    pub values: NodeId,
    pub loss_floor: f64,
    pub support_size: usize,
}

/// Eigenvalues of the per-step Gram products along one inner trajectory.
/// Entry `k` holds the (differentiable) spectrum captured at the parameters
/// *entering* inner step `k+1`.
#[derive(Clone, Debug)]
pub struct EigRecord {
    pub per_step: Vec<NodeId>,
    pub subset_size: usize,
    pub support_size: usize,
}

/// The Gram product `J Jᵀ` for one support batch, with the bookkeeping needed
/// to interpret its spectrum.
#[derive(Clone, Copy, Debug)]
pub struct GramProduct {
    pub node: NodeId,
    pub subset_size: usize,
    pub support_size: usize,
}

/// Turns a rank-1 node of per-sample losses into residuals
/// `r_i = sqrt(max(l_i, loss_floor) / n)`.
///
/// Exposed separately from [`residuals`] so objectives with non-classifier
/// losses (and tests with hand-picked loss values) can reuse the exact same
/// graph construction.
pub fn residuals_from_losses(
    g: &mut Graph,
    losses: NodeId,
    loss_floor: f64,
) -> Result<ResidualVector> {
    if !(loss_floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "residuals: loss_floor must be positive, got {loss_floor}"
        )));
    }
    let shape = g.value(losses).shape().to_vec();
    if shape.len() != 1 || shape[0] == 0 {
        return Err(Error::Domain {
            op: "residuals",
            msg: format!("expected a non-empty rank-1 loss vector, got shape {shape:?}"),
        });
    }
    let n = shape[0];
    let floored = g.clamp_floor(losses, loss_floor)?;
    let scaled = g.scale(floored, 1.0 / n as f64)?;
    let values = g.sqrt(scaled)?;
    Ok(ResidualVector {
        values,
        loss_floor,
        support_size: n,
    })
}

/// Residuals of a classifier on a support batch: per-sample cross-entropy
/// pushed through the least-squares rewrite.
pub fn residuals(
    g: &mut Graph,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    loss_floor: f64,
) -> Result<ResidualVector> {
    if labels.is_empty() {
        return Err(Error::Domain {
            op: "residuals",
            msg: "support set is empty".to_string(),
        });
    }
    let logits = models::forward(g, params, x)?;
    let losses = models::per_sample_loss(g, logits, labels)?;
    residuals_from_losses(g, losses, loss_floor)
}

/// Differentiates every residual against every node in `subset`, returning
/// one block per subset entry: block `e` has shape `[n, numel_e]`, row `i`
/// holding the gradient of residual `i` against entry `e`.
///
/// Column-concatenating the blocks in order would give the full Jacobian `J`
/// of shape `[n, total subset size]`; keeping them separate lets the Gram
/// product be assembled without a concatenation primitive.
///
/// With `create_graph` set, the rows are live graph nodes and anything built
/// from them can be differentiated again — this is what lets a penalty on the
/// Jacobian reach all parameters involved in forming it, not just the subset.
pub fn jacobian_blocks(
    g: &mut Graph,
    residuals: &ResidualVector,
    subset: &[NodeId],
    create_graph: bool,
) -> Result<Vec<NodeId>> {
    if subset.is_empty() {
        return Err(Error::Domain {
            op: "jacobian",
            msg: "parameter subset is empty".to_string(),
        });
    }
    let n = residuals.support_size;
    let mut rows_per_entry: Vec<Vec<NodeId>> = vec![Vec::with_capacity(n); subset.len()];
    for i in 0..n {
        let mut pick = vec![0.0; n];
        pick[i] = 1.0;
        let mask = g.constant(Tensor::from_raw(vec![n], pick));
        let masked = g.mul(residuals.values, mask)?;
        let r_i = g.sum(masked)?;
        let grads = g.gradient(r_i, subset, create_graph)?;
        for (e, grad) in grads.into_iter().enumerate() {
            let width = g.value(grad).numel();
            rows_per_entry[e].push(g.reshape(grad, &[width])?);
        }
    }
    rows_per_entry
        .into_iter()
        .map(|rows| g.stack(&rows))
        .collect()
}

/// Sums the per-block Gram contributions into `J Jᵀ = Σ_e G_e G_eᵀ`.
pub fn gram_of_blocks(g: &mut Graph, blocks: &[NodeId]) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &block in blocks {
        let outer = g.matmul_flags(block, block, false, true)?;
        total = Some(match total {
            Some(t) => g.add(t, outer)?,
            None => outer,
        });
    }
    total.ok_or(Error::Domain {
        op: "gram",
        msg: "no jacobian blocks given".to_string(),
    })
}

/// Full pipeline for one support batch: residuals, per-sample Jacobian
/// against the parameters in `groups`, and the `[n, n]` Gram product node.
pub fn jacobian_gram(
    g: &mut Graph,
    params: &ParamSet,
    groups: &BTreeSet<Group>,
    x: &Tensor,
    labels: &[usize],
    create_graph: bool,
    loss_floor: f64,
) -> Result<GramProduct> {
    let selected = params.select(groups);
    if selected.is_empty() {
        return Err(Error::Domain {
            op: "jacobian",
            msg: format!("no parameter entry matches groups {groups:?}"),
        });
    }
    let subset: Vec<NodeId> = selected.iter().map(|e| e.node).collect();
    let subset_size: usize = selected.iter().map(|e| g.value(e.node).numel()).sum();

    let res = residuals(g, params, x, labels, loss_floor)?;
    let blocks = jacobian_blocks(g, &res, &subset, create_graph)?;
    let node = gram_of_blocks(g, &blocks)?;
    Ok(GramProduct {
        node,
        subset_size,
        support_size: res.support_size,
    })
}

/// Mean over recorded steps of the population variance of base-10 log
/// eigenvalues, each spectrum floored at `eig_floor` first.
///
/// This is the conditioning penalty: zero exactly when every step's spectrum
/// is uniform, invariant under rescaling a spectrum by any positive constant,
/// and growing as the eigenvalues spread over more orders of magnitude.
pub fn condition_loss(g: &mut Graph, record: &EigRecord, eig_floor: f64) -> Result<NodeId> {
    if !(eig_floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "condition_loss: eig_floor must be positive, got {eig_floor}"
        )));
    }
    if record.per_step.is_empty() {
        return Err(Error::Domain {
            op: "condition-loss",
            msg: "no recorded steps (need K >= 1)".to_string(),
        });
    }
    let mut total: Option<NodeId> = None;
    for (k, &lambda) in record.per_step.iter().enumerate() {
        let count = g.value(lambda).numel();
        if count < 2 {
            return Err(Error::Domain {
                op: "condition-loss",
                msg: format!("step {k} has {count} eigenvalue(s); variance needs at least 2"),
            });
        }
        let floored = g.clamp_floor(lambda, eig_floor)?;
        let ln = g.log(floored)?;
        let log10 = g.scale(ln, 1.0 / LN_10)?;
        let var = g.variance(log10)?;
        total = Some(match total {
            Some(t) => g.add(t, var)?,
            None => var,
        });
    }
    g.scale(total.expect("at least one step"), 1.0 / record.per_step.len() as f64)
}

/// Value-level twin of one step's penalty term: population variance of
/// log10 of the floored eigenvalues. Used for reporting paths that need the
/// number without building graph.
pub(crate) fn log10_variance(eigenvalues: &[f64], floor: f64) -> f64 {
    let logs: Vec<f64> = eigenvalues
        .iter()
        .map(|l| l.max(floor).ln() / LN_10)
        .collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / logs.len() as f64
}
