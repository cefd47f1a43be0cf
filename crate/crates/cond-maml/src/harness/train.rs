//! The training driver: meta updates, periodic validation probes, condition
//! traces, checkpoint selection, and run artifacts.
//!
//! A run writes five files into its output directory:
//!
//! - `eval.csv` — one row per (probe iteration, adaptation step) with mean
//!   validation accuracy, CI halfwidth, and episode count;
//! - `trace.csv` — one row per (probe iteration, inner step) with the probe-
//!   averaged subset condition number, the optional full-parameter one, and
//!   the conditioning-penalty value of that iteration;
//! - `manifest.json` — run id, config echo, and best-model bookkeeping;
//! - `checkpoint-final.json`, `checkpoint-best.json`.
//!
//! Both CSVs start with a `# run <id> generated-unix <t>` line; everything
//! below it is a pure function of (config, seed). Probes run before the
//! first update (iteration 0), every `eval_every` updates, and at the final
//! iteration; the best checkpoint is the probe with the highest validation
//! accuracy at the largest configured step. A numeric failure mid-run aborts
//! after flushing the logs and checkpointing the last finite parameters.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::eval::evaluate_values;
use super::trace::trace_probe;
use super::{
    save_checkpoint, Checkpoint, RngState, TaskStream, TrainConfig, TRAIN_STREAM,
};
use crate::error::{Error, Result};
use crate::metalearn::{meta_step, AdamState};
use crate::models::ParamValues;
use crate::tasks::{derived_rng, Split, Task};

/// What a finished (non-diverged) run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub best_iteration: usize,
    /// Validation accuracy of the best probe at the largest eval step.
    pub best_val_accuracy: f64,
    pub eval_csv: PathBuf,
    pub trace_csv: PathBuf,
    pub manifest: PathBuf,
    pub final_checkpoint_path: PathBuf,
    pub best_checkpoint_path: PathBuf,
}

struct Logs {
    eval: BufWriter<File>,
    trace: BufWriter<File>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run_id(cfg: &TrainConfig, stamp: u64) -> String {
    let mut h = DefaultHasher::new();
    serde_json::to_string(cfg)
        .unwrap_or_default()
        .hash(&mut h);
    stamp.hash(&mut h);
    std::process::id().hash(&mut h);
    format!("{:016x}", h.finish())
}

/// Runs one validation probe: evaluation rows plus an averaged trace row.
/// Returns the accuracy at the largest configured step.
fn probe(
    cfg: &TrainConfig,
    stream: &TaskStream,
    logs: &mut Logs,
    iteration: usize,
    values: &ParamValues,
) -> Result<f64> {
    let report = evaluate_values(
        values,
        stream,
        Split::Val,
        cfg.eval_episodes,
        &cfg.eval_steps,
        cfg.meta.alpha,
        cfg.seed,
    )?;
    for row in &report.rows {
        writeln!(
            logs.eval,
            "{iteration},{},{},{},{}",
            row.step, row.mean_accuracy, row.ci_halfwidth, row.episodes
        )?;
    }

    let trace = trace_probe(
        values,
        stream,
        cfg.trace_episodes,
        cfg.meta.k_steps,
        cfg.meta.alpha,
        &cfg.meta.subset_groups,
        cfg.trace_full_kappa,
        iteration,
        cfg.seed,
    )?;
    for (step, kappa) in trace.subset_kappa.iter().enumerate() {
        let full = trace
            .full_kappa
            .as_ref()
            .map(|f| f[step].to_string())
            .unwrap_or_default();
        writeln!(
            logs.trace,
            "{iteration},{step},{kappa},{full},{}",
            trace.condition_loss
        )?;
    }

    Ok(report.rows.last().expect("eval_steps nonempty").mean_accuracy)
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: &'a str,
    generated_unix: u64,
    diverged: bool,
    error: Option<String>,
    iterations_completed: usize,
    best_iteration: usize,
    best_val_accuracy: f64,
    config: &'a TrainConfig,
}

struct Artifacts {
    eval_csv: PathBuf,
    trace_csv: PathBuf,
    manifest: PathBuf,
    final_path: PathBuf,
    best_path: PathBuf,
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    cfg: &TrainConfig,
    paths: &Artifacts,
    logs: &mut Logs,
    run_id: &str,
    stamp: u64,
    values: &ParamValues,
    iterations_completed: usize,
    best: &(usize, f64, ParamValues),
    error: Option<&Error>,
) -> Result<(Checkpoint, Checkpoint)> {
    logs.eval.flush()?;
    logs.trace.flush()?;

    let final_ckpt =
        Checkpoint::from_values(values, iterations_completed, RngState::fresh(cfg.seed));
    save_checkpoint(&final_ckpt, &paths.final_path)?;
    let best_ckpt = Checkpoint::from_values(&best.2, best.0, RngState::fresh(cfg.seed));
    save_checkpoint(&best_ckpt, &paths.best_path)?;

    let manifest = Manifest {
        run_id,
        generated_unix: stamp,
        diverged: error.is_some(),
        error: error.map(|e| e.to_string()),
        iterations_completed,
        best_iteration: best.0,
        best_val_accuracy: best.1,
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&paths.manifest, json + "\n")?;
    Ok((final_ckpt, best_ckpt))
}

/// Trains per the config and writes all run artifacts. On a numeric failure
/// (divergence), the logs are flushed, the last finite parameters are saved
/// as the final checkpoint, the manifest records the error, and the error is
/// returned.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stream = cfg.source.open()?;
    let model = cfg.model_config(stream.dim());
    model.validate()?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let stamp = unix_now();
    let id = run_id(cfg, stamp);
    let paths = Artifacts {
        eval_csv: cfg.output_dir.join("eval.csv"),
        trace_csv: cfg.output_dir.join("trace.csv"),
        manifest: cfg.output_dir.join("manifest.json"),
        final_path: cfg.output_dir.join("checkpoint-final.json"),
        best_path: cfg.output_dir.join("checkpoint-best.json"),
    };
    let mut logs = Logs {
        eval: BufWriter::new(File::create(&paths.eval_csv)?),
        trace: BufWriter::new(File::create(&paths.trace_csv)?),
    };
    writeln!(logs.eval, "# run {id} generated-unix {stamp}")?;
    writeln!(logs.eval, "iteration,step,mean_accuracy,ci_halfwidth,episodes")?;
    writeln!(logs.trace, "# run {id} generated-unix {stamp}")?;
    writeln!(
        logs.trace,
        "iteration,inner_step,subset_kappa,full_kappa,condition_loss"
    )?;

    let mut values = ParamValues::init(&model, &mut derived_rng(cfg.seed, 0))?;
    let mut adam = cfg
        .meta
        .outer_adam
        .then(|| AdamState::new(values.flatten().len()));

    let acc0 = probe(cfg, &stream, &mut logs, 0, &values)?;
    let mut best: (usize, f64, ParamValues) = (0, acc0, values.clone());

    for i in 0..cfg.episodes {
        let tasks: Vec<Task> = (0..cfg.meta.meta_batch)
            .map(|t| {
                let index = TRAIN_STREAM + (i * cfg.meta.meta_batch + t) as u64;
                stream.sample(Split::Train, &mut derived_rng(cfg.seed, index))
            })
            .collect::<Result<_>>()?;

        match meta_step(&values, &tasks, &cfg.meta, adam.as_mut()) {
            Ok((next, _metrics)) => values = next,
            Err(err) if err.exit_code() == 2 => {
                // Numeric failure: keep the last finite parameters.
                finalize(cfg, &paths, &mut logs, &id, stamp, &values, i, &best, Some(&err))?;
                return Err(err);
            }
            Err(err) => return Err(err),
        }

        let iteration = i + 1;
        if iteration % cfg.eval_every == 0 || iteration == cfg.episodes {
            let acc = probe(cfg, &stream, &mut logs, iteration, &values)?;
            if acc > best.1 {
                best = (iteration, acc, values.clone());
            }
        }
    }

    let (final_ckpt, best_ckpt) = finalize(
        cfg,
        &paths,
        &mut logs,
        &id,
        stamp,
        &values,
        cfg.episodes,
        &best,
        None,
    )?;
    Ok(TrainOutcome {
        final_checkpoint: final_ckpt,
        best_checkpoint: best_ckpt,
        best_iteration: best.0,
        best_val_accuracy: best.1,
        eval_csv: paths.eval_csv,
        trace_csv: paths.trace_csv,
        manifest: paths.manifest,
        final_checkpoint_path: paths.final_path,
        best_checkpoint_path: paths.best_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{load_checkpoint, TaskSource};

    fn tiny_cfg(dir: PathBuf) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.meta.k_steps = 2;
        cfg.meta.meta_batch = 2;
        cfg.hidden_dims = vec![6];
        cfg.source = TaskSource::Gaussian {
            dim: 3,
            n_way: 3,
            k_shot: 1,
            q_queries: 3,
            mean_scale: 1.0,
            noise_sigma: 0.4,
        };
        cfg.episodes = 6;
        cfg.eval_every = 3;
        cfg.eval_episodes = 8;
        cfg.eval_steps = vec![1, 2];
        cfg.trace_episodes = 2;
        cfg.seed = 5;
        cfg.output_dir = dir;
        cfg
    }

    fn non_header_lines(path: &std::path::Path) -> Vec<String> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    }

    #[test]
    fn zero_episode_run_checkpoints_the_initialization_with_one_probe() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_path_buf());
        cfg.episodes = 0;
        let outcome = train(&cfg).unwrap();

        assert_eq!(outcome.final_checkpoint.iteration, 0);
        assert_eq!(outcome.best_iteration, 0);
        assert_eq!(outcome.final_checkpoint, outcome.best_checkpoint);

        let eval_lines = non_header_lines(&outcome.eval_csv);
        assert_eq!(eval_lines[0], "iteration,step,mean_accuracy,ci_halfwidth,episodes");
        // One probe: a row per eval step, all at iteration 0.
        assert_eq!(eval_lines.len(), 1 + cfg.eval_steps.len());
        assert!(eval_lines[1].starts_with("0,1,"), "{}", eval_lines[1]);

        let loaded = load_checkpoint(&outcome.final_checkpoint_path).unwrap();
        assert_eq!(loaded, outcome.final_checkpoint);
    }

    #[test]
    fn short_run_writes_all_artifacts_with_the_probe_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_path_buf());
        let outcome = train(&cfg).unwrap();

        // Probes at 0, 3, 6 with two eval steps each.
        let eval_lines = non_header_lines(&outcome.eval_csv);
        assert_eq!(eval_lines.len(), 1 + 3 * 2);
        let iterations: Vec<&str> = eval_lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(iterations, ["0", "0", "3", "3", "6", "6"]);

        // Trace rows: K=2 inner steps per probe; full column empty.
        let trace_lines = non_header_lines(&outcome.trace_csv);
        assert_eq!(
            trace_lines[0],
            "iteration,inner_step,subset_kappa,full_kappa,condition_loss"
        );
        assert_eq!(trace_lines.len(), 1 + 3 * 2);
        assert!(trace_lines[1].split(',').nth(3).unwrap().is_empty());

        // The best probe is one of the probed iterations.
        assert!([0usize, 3, 6].contains(&outcome.best_iteration));
        assert_eq!(outcome.final_checkpoint.iteration, 6);

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&outcome.manifest).unwrap()).unwrap();
        assert_eq!(manifest["diverged"], false);
        assert_eq!(manifest["iterations_completed"], 6);
        assert_eq!(manifest["config"]["seed"], 5);
    }

    #[test]
    fn metric_files_are_deterministic_below_the_header() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_cfg(dir_a.path().to_path_buf());
        cfg_a.episodes = 3;
        let mut cfg_b = cfg_a.clone();
        cfg_b.output_dir = dir_b.path().to_path_buf();

        let a = train(&cfg_a).unwrap();
        let b = train(&cfg_b).unwrap();
        assert_eq!(non_header_lines(&a.eval_csv), non_header_lines(&b.eval_csv));
        assert_eq!(non_header_lines(&a.trace_csv), non_header_lines(&b.trace_csv));
        // Checkpoints carry no timestamp at all: byte-identical.
        assert_eq!(
            std::fs::read(&a.final_checkpoint_path).unwrap(),
            std::fs::read(&b.final_checkpoint_path).unwrap()
        );
    }

    #[test]
    fn conditioned_and_plain_runs_share_the_metric_schema() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut on = tiny_cfg(dir_a.path().to_path_buf());
        on.episodes = 2;
        on.eval_every = 2;
        let mut off = on.clone();
        off.output_dir = dir_b.path().to_path_buf();
        off.meta.gamma = 0.0;
        off.meta.conditioning_enabled = false;

        let a = train(&on).unwrap();
        let b = train(&off).unwrap();
        let (ea, eb) = (non_header_lines(&a.eval_csv), non_header_lines(&b.eval_csv));
        let (ta, tb) = (non_header_lines(&a.trace_csv), non_header_lines(&b.trace_csv));
        // Same shape: headers equal, row counts equal.
        assert_eq!(ea[0], eb[0]);
        assert_eq!(ta[0], tb[0]);
        assert_eq!(ea.len(), eb.len());
        assert_eq!(ta.len(), tb.len());
        // Different training: the post-update values differ somewhere.
        assert_ne!(ea, eb);
    }

    #[test]
    fn divergence_aborts_but_retains_the_last_finite_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_path_buf());
        // One colossal outer step leaves the parameters finite (~1e305);
        // the next iteration's layer product overflows inside inner_adapt.
        cfg.meta.beta = 1e305;
        cfg.meta.gamma = 0.0;
        cfg.meta.conditioning_enabled = false;
        cfg.episodes = 4;
        cfg.eval_every = 10;

        let err = train(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");

        let final_path = cfg.output_dir.join("checkpoint-final.json");
        let ckpt = load_checkpoint(&final_path).unwrap();
        assert_eq!(ckpt.iteration, 1, "one completed update before the blowup");

        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(cfg.output_dir.join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["diverged"], true);
        assert!(manifest["error"].as_str().unwrap().contains("step"));
    }
}
