//! Training driver, evaluation, condition tracing, checkpoints, and the
//! quadratic descent demo.
//!
//! This layer turns the engine into a runnable experiment: a flat key=value
//! config describes the model, the episode source, and the two-level loop;
//! [`train`] produces metric CSVs, a JSON run manifest, and final/best
//! checkpoints; [`evaluate`] scores a checkpoint over many episodes with 95%
//! confidence intervals (including adaptation horizons beyond the training
//! `K`); [`trace_condition`] replays inner loops to log per-step condition
//! numbers without touching the outer loop.
//!
//! Determinism contract: given (config, seed), every metric file is
//! byte-for-byte reproducible; the only varying text is the `# run ...`
//! header line carrying the run id and wall-clock stamp. Episode streams are
//! keyed by purpose (train/val/test/trace) so no consumer can shift another's
//! draws.

mod checkpoint;
mod config;
mod demo;
mod eval;
mod trace;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry, RngState, CHECKPOINT_VERSION,
};
pub use config::{load_train_config, parse_train_config, TrainConfig};
pub use demo::{demo_quadratic, write_demo_csv, DemoPoint};
pub use eval::{evaluate, evaluate_values, EvalReport, EvalRow};
pub use trace::{trace_condition, trace_probe, TraceRow};
pub use train::{train, TrainOutcome};

use std::path::PathBuf;
use std::sync::OnceLock;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{CsvDataset, GaussianTaskGen, Split, Task};

/// Environment variable capping the evaluation worker pool.
pub const THREADS_ENV: &str = "COND_MAML_THREADS";

/// Where episodes come from: a synthetic Gaussian generator or a CSV dataset
/// with class-disjoint splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSource {
    Gaussian {
        dim: usize,
        n_way: usize,
        k_shot: usize,
        q_queries: usize,
        mean_scale: f64,
        noise_sigma: f64,
    },
    Csv {
        features: PathBuf,
        splits: PathBuf,
        n_way: usize,
        k_shot: usize,
        q_queries: usize,
    },
}

impl TaskSource {
    pub fn n_way(&self) -> usize {
        match self {
            TaskSource::Gaussian { n_way, .. } | TaskSource::Csv { n_way, .. } => *n_way,
        }
    }

    pub fn k_shot(&self) -> usize {
        match self {
            TaskSource::Gaussian { k_shot, .. } | TaskSource::Csv { k_shot, .. } => *k_shot,
        }
    }

    pub fn q_queries(&self) -> usize {
        match self {
            TaskSource::Gaussian { q_queries, .. } | TaskSource::Csv { q_queries, .. } => {
                *q_queries
            }
        }
    }

    /// Validates parameters and, for CSV sources, loads the dataset.
    pub fn open(&self) -> Result<TaskStream> {
        match self {
            TaskSource::Gaussian {
                dim,
                n_way,
                k_shot,
                q_queries,
                mean_scale,
                noise_sigma,
            } => {
                let gen = GaussianTaskGen {
                    dim: *dim,
                    n_way: *n_way,
                    k_shot: *k_shot,
                    q_queries: *q_queries,
                    mean_scale: *mean_scale,
                    noise_sigma: *noise_sigma,
                    seed: 0,
                };
                gen.validate()?;
                Ok(TaskStream::Gaussian(gen))
            }
            TaskSource::Csv {
                features,
                splits,
                n_way,
                k_shot,
                q_queries,
            } => {
                if *n_way < 2 || *k_shot == 0 || *q_queries == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "episode shape: need n_way>=2, k_shot>0, q_queries>0, got N={n_way} K={k_shot} Q={q_queries}"
                    )));
                }
                let data = CsvDataset::load(features, splits)?;
                Ok(TaskStream::Csv {
                    data: Box::new(data),
                    n_way: *n_way,
                    k_shot: *k_shot,
                    q_queries: *q_queries,
                })
            }
        }
    }
}

/// An opened [`TaskSource`], ready to sample episodes.
#[derive(Clone, Debug)]
pub enum TaskStream {
    Gaussian(GaussianTaskGen),
    Csv {
        data: Box<CsvDataset>,
        n_way: usize,
        k_shot: usize,
        q_queries: usize,
    },
}

impl TaskStream {
    /// Feature dimension of every episode this stream produces.
    pub fn dim(&self) -> usize {
        match self {
            TaskStream::Gaussian(gen) => gen.dim,
            TaskStream::Csv { data, .. } => data.dim(),
        }
    }

    pub fn n_way(&self) -> usize {
        match self {
            TaskStream::Gaussian(gen) => gen.n_way,
            TaskStream::Csv { n_way, .. } => *n_way,
        }
    }

    /// Draws one episode. The Gaussian generator has no split structure (its
    /// task distribution is continuous), so `split` only matters for CSV
    /// data; disjointness between train/val/test Gaussian episodes comes from
    /// the per-purpose RNG streams.
    pub fn sample(&self, split: Split, rng: &mut ChaCha8Rng) -> Result<Task> {
        match self {
            TaskStream::Gaussian(gen) => gen.sample(rng),
            TaskStream::Csv {
                data,
                n_way,
                k_shot,
                q_queries,
            } => data.sample_episode(split, *n_way, *k_shot, *q_queries, rng),
        }
    }
}

/// Episode-index offsets keeping the four consumers of one seed apart.
/// Indices within a purpose stay below 2^40, so the streams cannot collide.
pub(crate) const TRAIN_STREAM: u64 = 0;
pub(crate) const VAL_STREAM: u64 = 1 << 40;
pub(crate) const TEST_STREAM: u64 = 2 << 40;
pub(crate) const TRACE_STREAM: u64 = 3 << 40;

pub(crate) fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => TRAIN_STREAM,
        Split::Val => VAL_STREAM,
        Split::Test => TEST_STREAM,
    }
}

/// The shared evaluation worker pool. Sized by `COND_MAML_THREADS` when the
/// variable holds a positive integer; rayon's default otherwise.
pub(crate) fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|n| *n > 0)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("worker pool construction cannot fail")
    })
}
