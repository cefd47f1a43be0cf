//! Many-episode evaluation with per-step accuracies and confidence
//! intervals.
//!
//! Each episode adapts a fresh copy of the parameters on its support set for
//! as many steps as the largest requested horizon and scores query accuracy
//! at every requested step (step 0 is the unadapted meta-initialization).
//! Horizons beyond the training `K` are just longer replays of the same
//! update rule; the trajectory prefix is identical, so step-`K` numbers agree
//! with an in-horizon evaluation on the same seed.
//!
//! Episodes fan out over the worker pool with seeds derived from
//! (seed, purpose, episode index); aggregation runs over the order-stable
//! collected results, so thread scheduling cannot change a single output
//! bit.

use rayon::prelude::*;

use super::{split_stream, worker_pool, Checkpoint, TaskStream};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metalearn::{inner_adapt, MetaConfig};
use crate::models::{self, ParamSet, ParamValues};
use crate::tasks::{derived_rng, Split, Task};

/// Accuracy statistics for one adaptation horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub mean_accuracy: f64,
    /// 95% halfwidth, 1.96 * sample std / sqrt(episodes).
    pub ci_halfwidth: f64,
    pub episodes: usize,
}

/// Rows in the order the steps were requested.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn check_steps(steps: &[usize]) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluate: eval_steps must not be empty".to_string(),
        ));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "evaluate: eval_steps must be strictly ascending, got {steps:?}"
        )));
    }
    Ok(())
}

/// Query accuracy of `values` on one task at each requested step.
fn episode_accuracies(
    values: &ParamValues,
    task: &Task,
    steps: &[usize],
    alpha: f64,
) -> Result<Vec<f64>> {
    let max_step = *steps.last().expect("steps checked nonempty");
    let mut g = Graph::new();
    let params = ParamSet::bind(&mut g, values);
    let stages = if max_step == 0 {
        vec![params]
    } else {
        // Value-only replay: no conditioning capture, inner gradients
        // detached. The trajectory values are identical to the training-time
        // ones; only graph bookkeeping differs.
        let cfg = MetaConfig {
            k_steps: max_step,
            alpha,
            gamma: 0.0,
            conditioning_enabled: false,
            first_order: true,
            ..MetaConfig::default()
        };
        inner_adapt(&mut g, &params, task, &cfg)?.per_step_params
    };
    steps
        .iter()
        .map(|&s| {
            let logits = models::forward(&mut g, &stages[s], &task.query_x)?;
            Ok(models::accuracy(g.value(logits), &task.query_y))
        })
        .collect()
}

/// Evaluates raw parameter values. The training driver probes with this to
/// avoid a round-trip through checkpoint encoding.
pub fn evaluate_values(
    values: &ParamValues,
    stream: &TaskStream,
    split: Split,
    episodes: usize,
    steps: &[usize],
    alpha: f64,
    seed: u64,
) -> Result<EvalReport> {
    check_steps(steps)?;
    if episodes == 0 {
        return Err(Error::InvalidArgument(
            "evaluate: need at least one episode".to_string(),
        ));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "evaluate: alpha must be non-negative and finite, got {alpha}"
        )));
    }

    let tag = split_stream(split);
    let per_episode: Vec<Vec<f64>> = worker_pool().install(|| {
        (0..episodes)
            .into_par_iter()
            .map(|e| {
                let mut rng = derived_rng(seed, tag + e as u64);
                let task = stream.sample(split, &mut rng)?;
                episode_accuracies(values, &task, steps, alpha)
            })
            .collect::<Result<_>>()
    })?;

    let n = episodes as f64;
    let rows = steps
        .iter()
        .enumerate()
        .map(|(j, &step)| {
            let mean = per_episode.iter().map(|a| a[j]).sum::<f64>() / n;
            let ci_halfwidth = if episodes > 1 {
                let ss = per_episode
                    .iter()
                    .map(|a| (a[j] - mean) * (a[j] - mean))
                    .sum::<f64>();
                1.96 * (ss / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            EvalRow {
                step,
                mean_accuracy: mean,
                ci_halfwidth,
                episodes,
            }
        })
        .collect();
    Ok(EvalReport { rows })
}

/// Evaluates a checkpoint's parameters; the checkpoint itself is never
/// modified (every episode adapts a fresh bound copy).
pub fn evaluate(
    ckpt: &Checkpoint,
    stream: &TaskStream,
    split: Split,
    episodes: usize,
    steps: &[usize],
    alpha: f64,
    seed: u64,
) -> Result<EvalReport> {
    let values = ckpt.to_values()?;
    evaluate_values(&values, stream, split, episodes, steps, alpha, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::TaskSource;
    use crate::models::MLPConfig;
    use crate::testutil::{assert_close, rng};

    fn gaussian_stream(noise: f64) -> TaskStream {
        TaskSource::Gaussian {
            dim: 8,
            n_way: 5,
            k_shot: 1,
            q_queries: 15,
            mean_scale: 1.0,
            noise_sigma: noise,
        }
        .open()
        .unwrap()
    }

    fn fresh_values(seed: u64) -> ParamValues {
        let cfg = MLPConfig {
            input_dim: 8,
            hidden_dims: vec![16],
            n_classes: 5,
            seed,
        };
        ParamValues::init(&cfg, &mut rng(seed)).unwrap()
    }

    #[test]
    fn untrained_five_way_model_sits_at_chance_at_step_zero() {
        let values = fresh_values(11);
        let report = evaluate_values(
            &values,
            &gaussian_stream(0.5),
            Split::Test,
            600,
            &[0, 1],
            0.4,
            123,
        )
        .unwrap();
        let step0 = &report.rows[0];
        assert_eq!(step0.step, 0);
        assert_eq!(step0.episodes, 600);
        assert!(
            (step0.mean_accuracy - 0.2).abs() <= 0.02,
            "step-0 accuracy {} strays from chance",
            step0.mean_accuracy
        );
        assert!(step0.ci_halfwidth > 0.0);
        for row in &report.rows {
            assert!(row.mean_accuracy >= 0.0 && row.mean_accuracy <= 1.0);
        }
    }

    #[test]
    fn zero_alpha_makes_every_step_equal_step_zero() {
        let values = fresh_values(13);
        let report = evaluate_values(
            &values,
            &gaussian_stream(0.5),
            Split::Test,
            40,
            &[0, 1, 2, 5],
            0.0,
            7,
        )
        .unwrap();
        for row in &report.rows[1..] {
            assert_eq!(row.mean_accuracy, report.rows[0].mean_accuracy);
        }
    }

    #[test]
    fn beyond_horizon_prefix_matches_the_short_run() {
        let values = fresh_values(17);
        let stream = gaussian_stream(0.5);
        let short = evaluate_values(&values, &stream, Split::Test, 50, &[3], 0.4, 99).unwrap();
        let long =
            evaluate_values(&values, &stream, Split::Test, 50, &[3, 9], 0.4, 99).unwrap();
        assert_eq!(short.rows[0], long.rows[0]);
    }

    #[test]
    fn ci_shrinks_like_inverse_square_root_of_episodes() {
        let values = fresh_values(19);
        let stream = gaussian_stream(0.5);
        let small = evaluate_values(&values, &stream, Split::Test, 150, &[1], 0.4, 5).unwrap();
        let large = evaluate_values(&values, &stream, Split::Test, 600, &[1], 0.4, 5).unwrap();
        let ratio = small.rows[0].ci_halfwidth / large.rows[0].ci_halfwidth;
        // Quadrupling episodes should halve the width, within 15%.
        assert!(
            (ratio - 2.0).abs() <= 0.3,
            "CI ratio {ratio} not within 15% of 2"
        );
    }

    #[test]
    fn near_separable_tasks_reach_high_accuracy_after_adaptation() {
        // Tight clusters (sigma 0.02 against unit-scale centers) are linearly
        // separable almost surely; a few support steps should nearly solve
        // them even from random parameters.
        let values = fresh_values(23);
        let report = evaluate_values(
            &values,
            &gaussian_stream(0.02),
            Split::Test,
            100,
            &[0, 5, 25],
            0.4,
            31,
        )
        .unwrap();
        let step25 = report.rows.last().unwrap();
        assert!(
            step25.mean_accuracy >= 0.9,
            "step-25 accuracy {} on near-separable tasks",
            step25.mean_accuracy
        );
        assert!(report.rows[1].mean_accuracy > report.rows[0].mean_accuracy);
    }

    #[test]
    fn evaluation_is_deterministic_and_split_streams_differ() {
        let values = fresh_values(29);
        let stream = gaussian_stream(0.5);
        let a = evaluate_values(&values, &stream, Split::Test, 80, &[0, 1], 0.4, 42).unwrap();
        let b = evaluate_values(&values, &stream, Split::Test, 80, &[0, 1], 0.4, 42).unwrap();
        assert_eq!(a, b);

        let val = evaluate_values(&values, &stream, Split::Val, 80, &[0, 1], 0.4, 42).unwrap();
        assert_ne!(a.rows[1].mean_accuracy, val.rows[1].mean_accuracy);
    }

    #[test]
    fn bad_requests_are_rejected() {
        let values = fresh_values(37);
        let stream = gaussian_stream(0.5);
        assert!(evaluate_values(&values, &stream, Split::Test, 10, &[], 0.4, 1).is_err());
        assert!(evaluate_values(&values, &stream, Split::Test, 10, &[2, 2], 0.4, 1).is_err());
        assert!(evaluate_values(&values, &stream, Split::Test, 10, &[5, 1], 0.4, 1).is_err());
        assert!(evaluate_values(&values, &stream, Split::Test, 0, &[1], 0.4, 1).is_err());
        assert!(evaluate_values(&values, &stream, Split::Test, 10, &[1], -0.1, 1).is_err());
    }

    #[test]
    fn accuracy_close_form_sanity_on_one_episode() {
        // Cross-check the per-episode plumbing: a single episode with alpha 0
        // must score the raw model's query accuracy.
        let values = fresh_values(41);
        let stream = gaussian_stream(0.5);
        let mut rng = derived_rng(77, split_stream(Split::Test));
        let task = stream.sample(Split::Test, &mut rng).unwrap();
        let direct = {
            let mut g = Graph::new();
            let params = ParamSet::bind(&mut g, &values);
            let logits = models::forward(&mut g, &params, &task.query_x).unwrap();
            models::accuracy(g.value(logits), &task.query_y)
        };
        let report =
            evaluate_values(&values, &stream, Split::Test, 1, &[0], 0.0, 77).unwrap();
        assert_close(report.rows[0].mean_accuracy, direct, 1e-15);
        assert_eq!(report.rows[0].ci_halfwidth, 0.0);
    }
}
