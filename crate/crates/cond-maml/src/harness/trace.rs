//! Condition-number tracing: replay an inner loop and report the Gram
//! spectrum at every pre-update stage, without any outer-loop machinery.
//!
//! The replay mirrors the training-time inner loop bit for bit (same update
//! ops in the same order) but never asks for gradients of gradients, so a
//! trace costs a handful of truncated backward sweeps per step. The full-
//! parameter view is cheap for the same reason the subset view is: the Gram
//! product is |D|x|D| regardless of how many parameters the Jacobian spans.

use std::collections::BTreeSet;

use super::TaskStream;
use crate::autodiff::Graph;
use crate::conditioning::{jacobian_gram, log10_variance, DEFAULT_EIG_FLOOR, DEFAULT_LOSS_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, jacobi_eigen, SymMatrix};
use crate::metalearn::Objective;
use crate::models::{Group, ParamSet, ParamValues};
use crate::tasks::{derived_rng, Split};

/// Per-step condition numbers observed while replaying one task's inner
/// loop, plus the value the conditioning penalty would take on it.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Condition number of the subset Gram spectrum entering step k, for
    /// k = 0..K-1.
    pub subset_kappa: Vec<f64>,
    /// Same, with the Jacobian taken over all parameters. `None` unless
    /// requested.
    pub full_kappa: Option<Vec<f64>>,
    /// Mean over steps of the log10-eigenvalue variance of the subset
    /// spectra.
    pub condition_loss: f64,
}

impl TraceRow {
    /// Element-wise mean of several rows from the same iteration, used to
    /// average a probe batch into one logged row.
    pub fn mean_of(rows: &[TraceRow]) -> Result<TraceRow> {
        let first = rows.first().ok_or_else(|| {
            Error::InvalidArgument("trace: cannot average zero rows".to_string())
        })?;
        let n = rows.len() as f64;
        let steps = first.subset_kappa.len();
        if rows.iter().any(|r| {
            r.subset_kappa.len() != steps
                || r.full_kappa.is_some() != first.full_kappa.is_some()
                || r.iteration != first.iteration
        }) {
            return Err(Error::InvalidArgument(
                "trace: rows to average disagree in shape or iteration".to_string(),
            ));
        }
        let mean_vec = |pick: &dyn Fn(&TraceRow) -> &[f64]| -> Vec<f64> {
            (0..steps)
                .map(|s| rows.iter().map(|r| pick(r)[s]).sum::<f64>() / n)
                .collect()
        };
        Ok(TraceRow {
            iteration: first.iteration,
            subset_kappa: mean_vec(&|r| &r.subset_kappa),
            full_kappa: first
                .full_kappa
                .is_some()
                .then(|| mean_vec(&|r| r.full_kappa.as_ref().expect("checked uniform"))),
            condition_loss: rows.iter().map(|r| r.condition_loss).sum::<f64>() / n,
        })
    }
}

fn stage_kappa(
    g: &mut Graph,
    params: &ParamSet,
    groups: &BTreeSet<Group>,
    objective_x: &crate::autodiff::Tensor,
    objective_y: &[usize],
) -> Result<(f64, f64)> {
    let gram = jacobian_gram(
        g,
        params,
        groups,
        objective_x,
        objective_y,
        false,
        DEFAULT_LOSS_FLOOR,
    )?;
    let eig = jacobi_eigen(&SymMatrix::symmetrize(g.value(gram.node))?)?;
    let kappa = condition_number(eig.eigenvalues.data(), DEFAULT_EIG_FLOOR)?;
    let variance = log10_variance(eig.eigenvalues.data(), DEFAULT_EIG_FLOOR);
    Ok((kappa, variance))
}

/// Replays `k_steps` inner updates of `task` starting from `values`,
/// computing the subset condition number (and optionally the all-parameter
/// one) at each pre-update stage. No outer gradients are built.
pub fn trace_condition(
    values: &ParamValues,
    task: &crate::tasks::Task,
    k_steps: usize,
    alpha: f64,
    subset: &BTreeSet<Group>,
    include_full: bool,
    iteration: usize,
) -> Result<TraceRow> {
    if k_steps == 0 {
        return Err(Error::InvalidArgument(
            "trace: k_steps must be at least 1".to_string(),
        ));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "trace: alpha must be non-negative and finite, got {alpha}"
        )));
    }
    let all_groups: BTreeSet<Group> = [Group::Emb, Group::Cls].into_iter().collect();

    let mut g = Graph::new();
    let mut current = ParamSet::bind(&mut g, values);
    let mut subset_kappa = Vec::with_capacity(k_steps);
    let mut full_kappa = include_full.then(|| Vec::with_capacity(k_steps));
    let mut penalty_terms = Vec::with_capacity(k_steps);

    for _ in 0..k_steps {
        let (kappa, variance) =
            stage_kappa(&mut g, &current, subset, &task.support_x, &task.support_y)?;
        subset_kappa.push(kappa);
        penalty_terms.push(variance);
        if let Some(full) = full_kappa.as_mut() {
            let (kappa, _) = stage_kappa(
                &mut g,
                &current,
                &all_groups,
                &task.support_x,
                &task.support_y,
            )?;
            full.push(kappa);
        }

        let loss = task.support_loss(&mut g, &current)?;
        let grads = g.gradient(loss, &current.nodes(), false)?;
        let mut next = Vec::with_capacity(grads.len());
        for (param, grad) in current.nodes().into_iter().zip(grads) {
            let delta = g.scale(grad, -alpha)?;
            next.push(g.add(param, delta)?);
        }
        current = current.with_nodes(next);
    }

    let condition_loss = penalty_terms.iter().sum::<f64>() / k_steps as f64;
    Ok(TraceRow {
        iteration,
        subset_kappa,
        full_kappa,
        condition_loss,
    })
}

/// Averaged trace over a fixed batch of probe episodes from the validation
/// stream. This is what the training driver logs and what run comparisons
/// should use: a single episode's spectrum is noisy, the probe mean is
/// stable.
#[allow(clippy::too_many_arguments)]
pub fn trace_probe(
    values: &ParamValues,
    stream: &TaskStream,
    episodes: usize,
    k_steps: usize,
    alpha: f64,
    subset: &BTreeSet<Group>,
    include_full: bool,
    iteration: usize,
    seed: u64,
) -> Result<TraceRow> {
    let rows = (0..episodes)
        .map(|j| {
            let mut rng = derived_rng(seed, super::TRACE_STREAM + j as u64);
            let task = stream.sample(Split::Val, &mut rng)?;
            trace_condition(values, &task, k_steps, alpha, subset, include_full, iteration)
        })
        .collect::<Result<Vec<_>>>()?;
    TraceRow::mean_of(&rows)
}
