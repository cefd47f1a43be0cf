//! Inner-loop adaptation, the combined task loss, and the meta update.
//!
//! The engine follows the classic two-level scheme. For each task, the inner
//! loop takes `K` gradient steps on the support loss starting from the shared
//! initialization `theta*`; every update is expressed as graph ops, so the
//! outer loss can differentiate *through* the whole trajectory. The outer
//! loop then descends the sum over tasks of
//!
//! ```text
//! task_loss = query loss at theta^(K) + gamma * conditioning penalty
//! ```
//!
//! where the penalty is the log-eigenvalue variance of the per-step Gram
//! products (see [`crate::conditioning`]). The spectrum entering step `k` is
//! captured at `theta^(k-1)` — *before* the update — and those Jacobian
//! sweeps run with graph construction enabled, so the penalty's gradient
//! reaches every parameter involved in forming the Jacobians, not just the
//! monitored subset.
//!
//! Everything here works against the [`Objective`] trait rather than a
//! concrete model. Episodes ([`crate::tasks::Task`]) are the production
//! objective; [`ScalarQuadratic`] and [`MatrixQuadratic`] are transparent
//! reference objectives whose meta-gradients can be derived by hand, used to
//! pin the second-order machinery down to closed-form values.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::conditioning::{
    condition_loss, gram_of_blocks, jacobian_blocks, residuals, residuals_from_losses, EigRecord,
    ResidualVector, DEFAULT_EIG_FLOOR, DEFAULT_LOSS_FLOOR,
};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, sym_eigen};
use crate::models::{self, Group, ParamEntry, ParamSet, ParamValues};
use crate::tasks::Task;

/// A task as seen by the meta-learner: scalar support/query losses plus the
/// least-squares residual view of the support set used for conditioning.
pub trait Objective {
    /// Mean support loss at `params`, as a scalar node.
    fn support_loss(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId>;
    /// Mean query loss at `params`, as a scalar node.
    fn query_loss(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId>;
    /// Per-sample support residuals (see [`crate::conditioning::residuals`]).
    fn support_residuals(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        loss_floor: f64,
    ) -> Result<ResidualVector>;
}

impl Objective for Task {
    fn support_loss(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId> {
        let logits = models::forward(g, params, &self.support_x)?;
        models::mean_loss(g, logits, &self.support_y)
    }

    fn query_loss(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId> {
        let logits = models::forward(g, params, &self.query_x)?;
        models::mean_loss(g, logits, &self.query_y)
    }

    fn support_residuals(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        loss_floor: f64,
    ) -> Result<ResidualVector> {
        residuals(g, params, &self.support_x, &self.support_y, loss_floor)
    }
}

/// One-parameter objective with quadratic support loss `a/2 (t - c)^2` and
/// query loss `b/2 (t - e)^2`.
///
/// Its full second-order meta-gradient has a closed form,
/// `(1 - alpha a)^K * b * (theta^(K) - e)`, making it the reference point for
/// verifying that gradients really flow through the inner updates.
#[derive(Clone, Copy, Debug)]
pub struct ScalarQuadratic {
    pub support_curvature: f64,
    pub support_target: f64,
    pub query_curvature: f64,
    pub query_target: f64,
}

impl ScalarQuadratic {
    fn quadratic(&self, g: &mut Graph, theta: NodeId, curvature: f64, target: f64) -> Result<NodeId> {
        let shift = g.constant_scalar(-target);
        let diff = g.add(theta, shift)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq)?;
        g.scale(total, 0.5 * curvature)
    }

    /// The exact meta-gradient for `k` inner steps at rate `alpha`.
    pub fn exact_meta_gradient(&self, theta0: f64, alpha: f64, k: usize) -> f64 {
        let (a, c) = (self.support_curvature, self.support_target);
        let mut theta = theta0;
        for _ in 0..k {
            theta -= alpha * a * (theta - c);
        }
        (1.0 - alpha * a).powi(k as i32) * self.query_curvature * (theta - self.query_target)
    }
}

impl Objective for ScalarQuadratic {
    fn support_loss(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId> {
        let theta = params.nodes()[0];
        self.quadratic(g, theta, self.support_curvature, self.support_target)
    }

    fn query_loss(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId> {
        let theta = params.nodes()[0];
        self.quadratic(g, theta, self.query_curvature, self.query_target)
    }

    fn support_residuals(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        loss_floor: f64,
    ) -> Result<ResidualVector> {
        let loss = self.support_loss(g, params)?;
        let as_vector = g.reshape(loss, &[1])?;
        residuals_from_losses(g, as_vector, loss_floor)
    }
}

/// Objective whose support loss is the pure quadratic bowl
/// `theta' A theta / 2` over a `[n, 1]` parameter. One inner step lands
/// exactly on `(I - alpha A) theta`, which pins the update arithmetic.
#[derive(Clone, Debug)]
pub struct MatrixQuadratic {
    pub a: Tensor,
}

impl MatrixQuadratic {
    fn bowl(&self, g: &mut Graph, theta: NodeId) -> Result<NodeId> {
        let a = g.constant(self.a.clone());
        let a_theta = g.matmul(a, theta)?;
        let quad = g.matmul_flags(theta, a_theta, true, false)?;
        let scalar = g.reshape(quad, &[])?;
        g.scale(scalar, 0.5)
    }
}

impl Objective for MatrixQuadratic {
    fn support_loss(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId> {
        let theta = params.nodes()[0];
        self.bowl(g, theta)
    }

    fn query_loss(&self, g: &mut Graph, params: &ParamSet) -> Result<NodeId> {
        let theta = params.nodes()[0];
        self.bowl(g, theta)
    }

    fn support_residuals(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        loss_floor: f64,
    ) -> Result<ResidualVector> {
        let loss = self.support_loss(g, params)?;
        let as_vector = g.reshape(loss, &[1])?;
        residuals_from_losses(g, as_vector, loss_floor)
    }
}

/// Hyperparameters of the two-level loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner adaptation steps per task.
    pub k_steps: usize,
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Outer-loop learning rate.
    pub beta: f64,
    /// Weight of the conditioning penalty in the task loss.
    pub gamma: f64,
    /// Tasks per meta update.
    pub meta_batch: usize,
    /// Parameter groups whose Jacobian feeds the penalty.
    pub subset_groups: BTreeSet<Group>,
    /// Capture per-step Gram spectra and (for gamma > 0) penalize them.
    pub conditioning_enabled: bool,
    /// Detach inner-update gradients (first-order approximation).
    pub first_order: bool,
    /// Use Adam for the outer update instead of plain gradient descent.
    pub outer_adam: bool,
    /// Optional global-norm cap on the meta-gradient.
    pub grad_clip: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            k_steps: 5,
            alpha: 0.4,
            beta: 0.01,
            gamma: 1.0,
            meta_batch: 4,
            subset_groups: [Group::Cls].into_iter().collect(),
            conditioning_enabled: true,
            first_order: false,
            outer_adam: false,
            grad_clip: None,
        }
    }
}

impl MetaConfig {
    /// Full validation for configured runs. Note that the identities
    /// `alpha = 0` and `beta = 0` are deliberately *not* rejected by
    /// [`inner_adapt`] / [`meta_step`] themselves (they are useful no-op
    /// baselines in tests); this check is for configurations that are meant
    /// to train.
    pub fn validate(&self) -> Result<()> {
        if self.k_steps == 0 {
            return Err(Error::InvalidArgument(
                "meta config: k_steps must be at least 1".to_string(),
            ));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "meta config: alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "meta config: beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "meta config: gamma must be non-negative and finite, got {}",
                self.gamma
            )));
        }
        if self.meta_batch == 0 {
            return Err(Error::InvalidArgument(
                "meta config: meta_batch must be at least 1".to_string(),
            ));
        }
        if self.subset_groups.is_empty() {
            return Err(Error::InvalidArgument(
                "meta config: subset_groups must not be empty".to_string(),
            ));
        }
        if let Some(cap) = self.grad_clip {
            if !(cap > 0.0) || !cap.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "meta config: grad_clip must be positive and finite, got {cap}"
                )));
            }
        }
        Ok(())
    }
}

/// The result of adapting one task: the parameter stages
/// `theta^(0)..theta^(K)` (entry 0 shares `theta*`'s nodes), the spectra
/// captured before each step (empty when conditioning is disabled), and the
/// support loss value observed at each pre-update stage.
#[derive(Clone, Debug)]
pub struct InnerTrajectory {
    pub per_step_params: Vec<ParamSet>,
    pub eig_records: EigRecord,
    pub per_step_support_loss: Vec<f64>,
}

impl InnerTrajectory {
    pub fn final_params(&self) -> &ParamSet {
        self.per_step_params.last().expect("K+1 stages")
    }
}

/// Entries of `params` in any of `groups`, in entry order, with the flattened
/// subset size.
pub fn select_subset<'a>(
    g: &Graph,
    params: &'a ParamSet,
    groups: &BTreeSet<Group>,
) -> Result<(Vec<&'a ParamEntry>, usize)> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument(
            "select_subset: no groups given".to_string(),
        ));
    }
    let entries = params.select(groups);
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "select_subset: no parameter entry matches groups {groups:?}"
        )));
    }
    let size = entries.iter().map(|e| g.value(e.node).numel()).sum();
    Ok((entries, size))
}

fn step_error(step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { op } => Error::Convergence {
            what: "inner adaptation",
            detail: format!("non-finite value in {op} at step {step}"),
        },
        other => other,
    }
}

/// Runs `K` inner gradient steps on the support loss, capturing the Gram
/// spectrum at each pre-update stage when conditioning is enabled.
///
/// Ordering matters and is fixed: the spectrum entering step `k` is computed
/// at `theta^(k-1)` *before* the update, so record `k` never depends on
/// updates `>= k`. The capture sweeps always build graph (the penalty must
/// differentiate through them); the update sweeps build graph unless
/// `first_order` is set, in which case the inner gradients are detached and
/// the trajectory becomes a constant offset from `theta*`.
pub fn inner_adapt<O: Objective>(
    g: &mut Graph,
    theta_star: &ParamSet,
    objective: &O,
    cfg: &MetaConfig,
) -> Result<InnerTrajectory> {
    if cfg.k_steps == 0 {
        return Err(Error::InvalidArgument(
            "inner_adapt: k_steps must be at least 1".to_string(),
        ));
    }
    if !(cfg.alpha >= 0.0) || !cfg.alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "inner_adapt: alpha must be non-negative and finite, got {}",
            cfg.alpha
        )));
    }
    if cfg.conditioning_enabled {
        // Fail fast on an unusable subset before doing any work.
        select_subset(g, theta_star, &cfg.subset_groups)?;
    }

    let mut stages = vec![theta_star.clone()];
    let mut eig_steps = Vec::new();
    let mut support_losses = Vec::with_capacity(cfg.k_steps);
    let mut subset_size = 0;
    let mut support_size = 0;

    for k in 1..=cfg.k_steps {
        let current = stages.last().expect("stage k-1").clone();

        if cfg.conditioning_enabled {
            let res = objective
                .support_residuals(g, &current, DEFAULT_LOSS_FLOOR)
                .map_err(|e| step_error(k, e))?;
            let (entries, size) = select_subset(g, &current, &cfg.subset_groups)?;
            let subset: Vec<NodeId> = entries.iter().map(|e| e.node).collect();
            let blocks =
                jacobian_blocks(g, &res, &subset, true).map_err(|e| step_error(k, e))?;
            let gram = gram_of_blocks(g, &blocks)?;
            let eig = sym_eigen(g, gram).map_err(|e| step_error(k, e))?;
            if let Some(bad) = g
                .value(eig.values)
                .data()
                .iter()
                .find(|l| **l < -1e-10)
            {
                return Err(Error::Domain {
                    op: "inner-adapt",
                    msg: format!("step {k}: Gram eigenvalue {bad:e} is negative beyond tolerance"),
                });
            }
            eig_steps.push(eig.values);
            subset_size = size;
            support_size = res.support_size;
        }

        let loss = objective
            .support_loss(g, &current)
            .map_err(|e| step_error(k, e))?;
        support_losses.push(g.scalar_value(loss));

        let grads = g
            .gradient(loss, &current.nodes(), !cfg.first_order)
            .map_err(|e| step_error(k, e))?;
        let mut next_nodes = Vec::with_capacity(grads.len());
        for (param, grad) in current.nodes().into_iter().zip(grads) {
            let delta = g.scale(grad, -cfg.alpha)?;
            next_nodes.push(g.add(param, delta)?);
        }
        stages.push(current.with_nodes(next_nodes));
    }

    Ok(InnerTrajectory {
        per_step_params: stages,
        eig_records: EigRecord {
            per_step: eig_steps,
            subset_size,
            support_size,
        },
        per_step_support_loss: support_losses,
    })
}

/// Adds the weighted conditioning penalty to an already-built query loss.
fn combined_loss(
    g: &mut Graph,
    traj: &InnerTrajectory,
    query: NodeId,
    cfg: &MetaConfig,
) -> Result<NodeId> {
    if cfg.conditioning_enabled && cfg.gamma != 0.0 {
        let penalty = condition_loss(g, &traj.eig_records, DEFAULT_EIG_FLOOR)?;
        let weighted = g.scale(penalty, cfg.gamma)?;
        g.add(query, weighted)
    } else {
        Ok(query)
    }
}

/// The per-task outer objective: query loss at `theta^(K)` plus
/// `gamma * condition_loss` over the recorded spectra. The penalty term is
/// omitted entirely when conditioning is disabled (or weighted by zero), in
/// which case this is exactly the classic meta-learning objective.
pub fn task_loss<O: Objective>(
    g: &mut Graph,
    traj: &InnerTrajectory,
    objective: &O,
    cfg: &MetaConfig,
) -> Result<NodeId> {
    let query = objective.query_loss(g, traj.final_params())?;
    combined_loss(g, traj, query, cfg)
}

/// Aggregates reported by one meta update, averaged over its task batch.
#[derive(Clone, Copy, Debug)]
pub struct MetaMetrics {
    pub mean_query_loss: f64,
    pub mean_support_loss: f64,
    /// Mean conditioning penalty; `None` when conditioning is disabled.
    pub mean_condition_loss: Option<f64>,
    /// Mean condition number of the step-0 Gram spectrum; `None` when
    /// conditioning is disabled.
    pub mean_kappa_step0: Option<f64>,
    /// Euclidean norm of the (unclipped) meta-gradient.
    pub grad_norm: f64,
}

/// Value-level replica of [`condition_loss`] for reporting, so metrics are
/// available even when the penalty is not part of the training loss.
fn condition_loss_value(g: &Graph, record: &EigRecord, floor: f64) -> f64 {
    let total: f64 = record
        .per_step
        .iter()
        .map(|node| crate::conditioning::log10_variance(g.value(*node).data(), floor))
        .sum();
    total / record.per_step.len() as f64
}

/// Builds the summed outer loss over `tasks` and differentiates it with
/// respect to `theta_star`'s nodes. Returns the per-entry gradient nodes
/// (values live in `g`) plus batch metrics.
pub fn meta_gradient<O: Objective>(
    g: &mut Graph,
    theta_star: &ParamSet,
    tasks: &[O],
    cfg: &MetaConfig,
) -> Result<(Vec<NodeId>, MetaMetrics)> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument(
            "meta_gradient: need at least one task".to_string(),
        ));
    }

    let mut total: Option<NodeId> = None;
    let mut query_sum = 0.0;
    let mut support_sum = 0.0;
    let mut penalty_sum = 0.0;
    let mut kappa_sum = 0.0;
    for task in tasks {
        let traj = inner_adapt(g, theta_star, task, cfg)?;
        let query = task.query_loss(g, traj.final_params())?;
        query_sum += g.scalar_value(query);
        support_sum += traj.per_step_support_loss[0];
        if cfg.conditioning_enabled {
            penalty_sum += condition_loss_value(g, &traj.eig_records, DEFAULT_EIG_FLOOR);
            kappa_sum +=
                condition_number(g.value(traj.eig_records.per_step[0]).data(), DEFAULT_EIG_FLOOR)?;
        }
        let combined = combined_loss(g, &traj, query, cfg)?;
        total = Some(match total {
            Some(t) => g.add(t, combined)?,
            None => combined,
        });
    }

    let grads = g
        .gradient(total.expect("at least one task"), &theta_star.nodes(), false)
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Convergence {
                what: "meta update",
                detail: format!("meta-gradient became non-finite in {op}"),
            },
            other => other,
        })?;
    for (entry, grad) in theta_star.entries().iter().zip(&grads) {
        if g.value(*grad).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Convergence {
                what: "meta update",
                detail: format!("gradient for parameter {} is non-finite", entry.name),
            });
        }
    }

    let grad_norm = grads
        .iter()
        .flat_map(|n| g.value(*n).data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let n = tasks.len() as f64;
    let metrics = MetaMetrics {
        mean_query_loss: query_sum / n,
        mean_support_loss: support_sum / n,
        mean_condition_loss: cfg.conditioning_enabled.then_some(penalty_sum / n),
        mean_kappa_step0: cfg.conditioning_enabled.then_some(kappa_sum / n),
        grad_norm,
    };
    Ok((grads, metrics))
}

/// Adam accumulator for the optional non-default outer optimizer.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// The update direction (already scaled by `lr`) for one gradient.
    fn direction(&mut self, grad: &[f64], lr: f64) -> Result<Vec<f64>> {
        if grad.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state tracks {} values, gradient has {}",
                self.m.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        Ok(grad
            .iter()
            .enumerate()
            .map(|(i, &gr)| {
                self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * gr;
                self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * gr * gr;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                lr * m_hat / (v_hat.sqrt() + Self::EPS)
            })
            .collect())
    }
}

/// One outer update: sums task losses, differentiates with respect to
/// `theta*`, and descends. Plain gradient descent by default; pass the Adam
/// state if and only if `cfg.outer_adam` is set.
pub fn meta_step<O: Objective>(
    values: &ParamValues,
    tasks: &[O],
    cfg: &MetaConfig,
    adam: Option<&mut AdamState>,
) -> Result<(ParamValues, MetaMetrics)> {
    if !(cfg.beta >= 0.0) || !cfg.beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "meta_step: beta must be non-negative and finite, got {}",
            cfg.beta
        )));
    }
    if cfg.outer_adam != adam.is_some() {
        return Err(Error::InvalidArgument(
            "meta_step: outer_adam flag and optimizer state must agree".to_string(),
        ));
    }

    let mut g = Graph::new();
    let theta_star = ParamSet::bind(&mut g, values);
    let (grads, metrics) = meta_gradient(&mut g, &theta_star, tasks, cfg)?;

    let mut flat: Vec<f64> = grads
        .iter()
        .flat_map(|n| g.value(*n).data().iter().copied())
        .collect();
    if let Some(cap) = cfg.grad_clip {
        let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > cap {
            let shrink = cap / norm;
            for v in &mut flat {
                *v *= shrink;
            }
        }
    }

    let old = values.flatten();
    let stepped: Vec<f64> = match adam {
        Some(state) => {
            let dir = state.direction(&flat, cfg.beta)?;
            old.iter().zip(&dir).map(|(p, d)| p - d).collect()
        }
        None => old
            .iter()
            .zip(&flat)
            .map(|(p, gr)| p - cfg.beta * gr)
            .collect(),
    };
    Ok((values.unflatten(&stepped)?, metrics))
}
