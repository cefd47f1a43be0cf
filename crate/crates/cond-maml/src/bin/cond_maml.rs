//! Thin command-line front end over the library's harness.
//!
//! Four subcommands: `train` runs a full job from a flat key=value config,
//! `eval` scores a checkpoint with confidence intervals, `demo-quadratic`
//! prints the two-basin gradient-descent comparison as CSV, and `trace`
//! replays inner loops from a checkpoint to report per-step condition
//! numbers. Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use cond_maml::harness::{
    demo_quadratic, evaluate, load_checkpoint, load_train_config, trace_probe, train,
    write_demo_csv, Checkpoint,
};
use cond_maml::models::MLPConfig;
use cond_maml::tasks::Split;
use cond_maml::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cond-maml",
    version,
    about = "Meta-learning with a condition-number penalty on the inner-loop spectrum"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job and write metric CSVs, a manifest, and checkpoints.
    Train {
        /// Flat key=value run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint over many episodes with 95% confidence intervals.
    Eval {
        /// Checkpoint to evaluate (never modified).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration supplying the episode source and inner learning
        /// rate (the checkpoint stores the model, not the task distribution).
        #[arg(long)]
        config: PathBuf,
        /// Episodes to average.
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        /// Adaptation horizons to report; may exceed the training horizon.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        steps: Vec<usize>,
        /// Episode split to draw from.
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Print gradient-descent trajectories on quadratic bowls of chosen
    /// condition numbers as CSV.
    #[command(name = "demo-quadratic")]
    DemoQuadratic {
        /// Condition numbers to compare.
        #[arg(long, value_delimiter = ',', default_value = "1,50")]
        kappa: Vec<f64>,
        /// Gradient-descent learning rate.
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        /// Descent steps per trajectory.
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Replay inner loops from a checkpoint and print per-step condition
    /// numbers averaged over probe episodes.
    Trace {
        /// Checkpoint whose parameters are traced.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration supplying the episode source, inner learning
        /// rate, horizon, and parameter subset.
        #[arg(long)]
        config: PathBuf,
        /// Probe episodes averaged into the trace (default: the config's
        /// trace_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Also trace the all-parameter spectrum.
        #[arg(long)]
        full: bool,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!(
            "unknown split {other:?} (expected train, val, or test)"
        )),
    }
}

/// A checkpoint is only meaningful under the architecture it was trained
/// with; catch a config/checkpoint mismatch before it surfaces as a shape
/// error deep in a forward pass. Seeds may differ (evaluating someone else's
/// checkpoint under a local config is fine).
fn check_model_agreement(ckpt: &Checkpoint, expected: &MLPConfig) -> Result<()> {
    let got = &ckpt.model;
    let mismatch = if got.input_dim != expected.input_dim {
        Some(format!(
            "input_dim {} vs {} from the task source",
            got.input_dim, expected.input_dim
        ))
    } else if got.hidden_dims != expected.hidden_dims {
        Some(format!(
            "hidden_dims {:?} vs {:?} from the config",
            got.hidden_dims, expected.hidden_dims
        ))
    } else if got.n_classes != expected.n_classes {
        Some(format!(
            "n_classes {} vs {} from the task source",
            got.n_classes, expected.n_classes
        ))
    } else {
        None
    };
    match mismatch {
        Some(what) => Err(Error::Checkpoint(format!(
            "model does not match the config: {what}"
        ))),
        None => Ok(()),
    }
}

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = load_train_config(config)?;
    let outcome = train(&cfg)?;
    println!("training complete: {} iterations", cfg.episodes);
    println!(
        "best validation accuracy {:.4} at iteration {}",
        outcome.best_val_accuracy, outcome.best_iteration
    );
    println!("eval rows:   {}", outcome.eval_csv.display());
    println!("trace rows:  {}", outcome.trace_csv.display());
    println!("manifest:    {}", outcome.manifest.display());
    println!("final model: {}", outcome.final_checkpoint_path.display());
    println!("best model:  {}", outcome.best_checkpoint_path.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    config: &Path,
    episodes: usize,
    steps: &[usize],
    split: Split,
) -> Result<()> {
    let cfg = load_train_config(config)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let stream = cfg.source.open()?;
    check_model_agreement(&ckpt, &cfg.model_config(stream.dim()))?;

    let report = evaluate(
        &ckpt,
        &stream,
        split,
        episodes,
        steps,
        cfg.meta.alpha,
        cfg.seed,
    )?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "step,mean_accuracy,ci_halfwidth,episodes")?;
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{}",
            row.step, row.mean_accuracy, row.ci_halfwidth, row.episodes
        )?;
    }
    Ok(())
}

fn cmd_demo(kappa: &[f64], lr: f64, steps: usize) -> Result<()> {
    let rows = demo_quadratic(kappa, lr, steps)?;
    write_demo_csv(std::io::stdout().lock(), &rows)
}

fn cmd_trace(checkpoint: &Path, config: &Path, episodes: Option<usize>, full: bool) -> Result<()> {
    let cfg = load_train_config(config)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let stream = cfg.source.open()?;
    check_model_agreement(&ckpt, &cfg.model_config(stream.dim()))?;

    let values = ckpt.to_values()?;
    let row = trace_probe(
        &values,
        &stream,
        episodes.unwrap_or(cfg.trace_episodes),
        cfg.meta.k_steps,
        cfg.meta.alpha,
        &cfg.meta.subset_groups,
        full || cfg.trace_full_kappa,
        ckpt.iteration,
        cfg.seed,
    )?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "iteration,inner_step,subset_kappa,full_kappa,condition_loss")?;
    for (step, kappa) in row.subset_kappa.iter().enumerate() {
        let full_col = row
            .full_kappa
            .as_ref()
            .map(|f| f[step].to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{step},{kappa},{full_col},{}",
            row.iteration, row.condition_loss
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            checkpoint,
            config,
            episodes,
            steps,
            split,
        } => cmd_eval(&checkpoint, &config, episodes, &steps, split),
        Command::DemoQuadratic { kappa, lr, steps } => cmd_demo(&kappa, lr, steps),
        Command::Trace {
            checkpoint,
            config,
            episodes,
            full,
        } => cmd_trace(&checkpoint, &config, episodes, full),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive as clap "errors" but are successes;
            // anything else is a usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
