//! Run configuration: a flat key=value text format and its validated
//! in-memory form.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment,
//! blank lines are ignored, every key has a default, unknown or duplicate
//! keys are errors. The full schema:
//!
//! ```text
//! # two-level loop
//! k_steps = 5            # inner adaptation steps per task
//! alpha = 0.4            # inner learning rate
//! beta = 0.01            # outer learning rate
//! gamma = 1.0            # conditioning penalty weight
//! meta_batch = 4         # tasks per meta update
//! subset = cls           # penalized parameter groups, comma list of cls|emb
//! conditioning = true    # capture per-step spectra (required when gamma > 0)
//! first_order = false    # detach inner gradients
//! outer_adam = false     # Adam instead of plain outer gradient descent
//! grad_clip = none       # global-norm cap on the meta-gradient, or `none`
//!
//! # model
//! hidden = 32,32         # hidden layer widths
//!
//! # episodes
//! source = gaussian      # gaussian | csv
//! dim = 16               # gaussian: feature dimension
//! n_way = 5
//! k_shot = 1
//! q_queries = 15
//! mean_scale = 1.0       # gaussian: class-center ball radius
//! noise_sigma = 0.5      # gaussian: within-class noise
//! features_csv = ...     # csv only: feature table path
//! splits_csv = ...       # csv only: class-to-split table path
//!
//! # run
//! episodes = 2000        # training iterations
//! eval_every = 100       # iterations between validation probes
//! eval_episodes = 600    # episodes per probe
//! eval_steps = 1,2,3,4,5 # adaptation horizons to report
//! trace_episodes = 8     # probe episodes averaged into each trace row
//! trace_full_kappa = false
//! seed = 7
//! output_dir = runs
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TaskSource;
use crate::error::{Error, Result};
use crate::metalearn::MetaConfig;
use crate::models::{Group, MLPConfig};
use crate::tasks::GaussianTaskGen;

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub meta: MetaConfig,
    pub hidden_dims: Vec<usize>,
    pub source: TaskSource,
    /// Training iterations (0 means: checkpoint the initialization).
    pub episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_steps: Vec<usize>,
    pub trace_episodes: usize,
    pub trace_full_kappa: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            meta: MetaConfig::default(),
            hidden_dims: vec![32, 32],
            source: TaskSource::Gaussian {
                dim: 16,
                n_way: 5,
                k_shot: 1,
                q_queries: 15,
                mean_scale: 1.0,
                noise_sigma: 0.5,
            },
            episodes: 2000,
            eval_every: 100,
            eval_episodes: 600,
            eval_steps: vec![1, 2, 3, 4, 5],
            trace_episodes: 8,
            trace_full_kappa: false,
            seed: 7,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.meta.gamma > 0.0 && !self.meta.conditioning_enabled {
            return Err(Error::Config(
                "gamma > 0 needs conditioning = true (the penalty cannot be \
                 applied without capturing spectra)"
                    .to_string(),
            ));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "hidden layer widths must be positive and nonempty, got {:?}",
                self.hidden_dims
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".to_string()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config(
                "eval_episodes must be at least 1".to_string(),
            ));
        }
        if self.eval_steps.is_empty() {
            return Err(Error::Config("eval_steps must not be empty".to_string()));
        }
        if self.eval_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "eval_steps must be strictly ascending, got {:?}",
                self.eval_steps
            )));
        }
        if self.trace_episodes == 0 {
            return Err(Error::Config(
                "trace_episodes must be at least 1".to_string(),
            ));
        }
        if let TaskSource::Gaussian {
            dim,
            n_way,
            k_shot,
            q_queries,
            mean_scale,
            noise_sigma,
        } = &self.source
        {
            GaussianTaskGen {
                dim: *dim,
                n_way: *n_way,
                k_shot: *k_shot,
                q_queries: *q_queries,
                mean_scale: *mean_scale,
                noise_sigma: *noise_sigma,
                seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }

    /// The model this config trains, given the episode feature dimension.
    pub fn model_config(&self, input_dim: usize) -> MLPConfig {
        MLPConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            n_classes: self.source.n_way(),
            seed: self.seed,
        }
    }
}

struct Raw<'a> {
    line: usize,
    value: &'a str,
}

fn fail(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

impl Raw<'_> {
    fn parse<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<T> {
        self.value.parse().map_err(|_| {
            fail(
                self.line,
                format!("{key} expects {kind}, got {:?}", self.value),
            )
        })
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.value {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(fail(
                self.line,
                format!("{key} expects true or false, got {other:?}"),
            )),
        }
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.value
            .split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    fail(
                        self.line,
                        format!("{key} expects comma-separated integers, got {:?}", self.value),
                    )
                })
            })
            .collect()
    }

    fn groups(&self, key: &str) -> Result<BTreeSet<Group>> {
        self.value
            .split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    fail(
                        self.line,
                        format!("{key} expects a comma list of cls|emb, got {:?}", self.value),
                    )
                })
            })
            .collect()
    }
}

/// Parses the flat key=value format. Every key is optional; the defaults are
/// the documented ones.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let (mut dim, mut n_way, mut k_shot, mut q_queries) = (16usize, 5usize, 1usize, 15usize);
    let (mut mean_scale, mut noise_sigma) = (1.0f64, 0.5f64);
    let mut source_kind = "gaussian".to_string();
    let mut features_csv: Option<PathBuf> = None;
    let mut splits_csv: Option<PathBuf> = None;
    let mut seen: BTreeSet<String> = BTreeSet::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(fail(line_no, format!("expected key = value, got {line:?}")));
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(fail(line_no, format!("duplicate key {key:?}")));
        }
        let raw = Raw {
            line: line_no,
            value,
        };
        match key {
            "k_steps" => cfg.meta.k_steps = raw.parse(key, "a positive integer")?,
            "alpha" => cfg.meta.alpha = raw.parse(key, "a number")?,
            "beta" => cfg.meta.beta = raw.parse(key, "a number")?,
            "gamma" => cfg.meta.gamma = raw.parse(key, "a number")?,
            "meta_batch" => cfg.meta.meta_batch = raw.parse(key, "a positive integer")?,
            "subset" => cfg.meta.subset_groups = raw.groups(key)?,
            "conditioning" => cfg.meta.conditioning_enabled = raw.bool(key)?,
            "first_order" => cfg.meta.first_order = raw.bool(key)?,
            "outer_adam" => cfg.meta.outer_adam = raw.bool(key)?,
            "grad_clip" => {
                cfg.meta.grad_clip = if value == "none" {
                    None
                } else {
                    Some(raw.parse(key, "a number or `none`")?)
                }
            }
            "hidden" => cfg.hidden_dims = raw.usize_list(key)?,
            "source" => match value {
                "gaussian" | "csv" => source_kind = value.to_string(),
                other => {
                    return Err(fail(
                        line_no,
                        format!("source expects gaussian or csv, got {other:?}"),
                    ))
                }
            },
            "dim" => dim = raw.parse(key, "a positive integer")?,
            "n_way" => n_way = raw.parse(key, "a positive integer")?,
            "k_shot" => k_shot = raw.parse(key, "a positive integer")?,
            "q_queries" => q_queries = raw.parse(key, "a positive integer")?,
            "mean_scale" => mean_scale = raw.parse(key, "a number")?,
            "noise_sigma" => noise_sigma = raw.parse(key, "a number")?,
            "features_csv" => features_csv = Some(PathBuf::from(value)),
            "splits_csv" => splits_csv = Some(PathBuf::from(value)),
            "episodes" => cfg.episodes = raw.parse(key, "an integer")?,
            "eval_every" => cfg.eval_every = raw.parse(key, "a positive integer")?,
            "eval_episodes" => cfg.eval_episodes = raw.parse(key, "a positive integer")?,
            "eval_steps" => cfg.eval_steps = raw.usize_list(key)?,
            "trace_episodes" => cfg.trace_episodes = raw.parse(key, "a positive integer")?,
            "trace_full_kappa" => cfg.trace_full_kappa = raw.bool(key)?,
            "seed" => cfg.seed = raw.parse(key, "an unsigned integer")?,
            "output_dir" => cfg.output_dir = PathBuf::from(value),
            unknown => return Err(fail(line_no, format!("unknown key {unknown:?}"))),
        }
    }

    cfg.source = match source_kind.as_str() {
        "gaussian" => {
            if features_csv.is_some() || splits_csv.is_some() {
                return Err(Error::Config(
                    "features_csv/splits_csv only apply when source = csv".to_string(),
                ));
            }
            TaskSource::Gaussian {
                dim,
                n_way,
                k_shot,
                q_queries,
                mean_scale,
                noise_sigma,
            }
        }
        "csv" => {
            if seen.contains("dim") || seen.contains("mean_scale") || seen.contains("noise_sigma")
            {
                return Err(Error::Config(
                    "dim/mean_scale/noise_sigma only apply when source = gaussian \
                     (csv data carries its own dimensions)"
                        .to_string(),
                ));
            }
            let features = features_csv
                .ok_or_else(|| Error::Config("source = csv needs features_csv".to_string()))?;
            let splits = splits_csv
                .ok_or_else(|| Error::Config("source = csv needs splits_csv".to_string()))?;
            TaskSource::Csv {
                features,
                splits,
                n_way,
                k_shot,
                q_queries,
            }
        }
        _ => unreachable!("kind restricted at parse time"),
    };

    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file, contextualizing errors with the path.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_train_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default_config() {
        let cfg = parse_train_config("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn a_full_file_round_trips_every_field() {
        let text = "\
# twin run, conditioned
k_steps = 5
alpha = 0.4
beta = 0.01
gamma = 1.0
meta_batch = 4
subset = cls,emb
conditioning = true
first_order = false
outer_adam = false
grad_clip = 0.5

hidden = 16,8
source = gaussian
dim = 12          # feature dimension
n_way = 4
k_shot = 2
q_queries = 6
mean_scale = 1.5
noise_sigma = 0.25

episodes = 50
eval_every = 10
eval_episodes = 40
eval_steps = 1,3,5
trace_episodes = 4
trace_full_kappa = true
seed = 99
output_dir = out/twin
";
        let cfg = parse_train_config(text).unwrap();
        assert_eq!(cfg.meta.k_steps, 5);
        assert_eq!(
            cfg.meta.subset_groups,
            [Group::Cls, Group::Emb].into_iter().collect()
        );
        assert_eq!(cfg.meta.grad_clip, Some(0.5));
        assert_eq!(cfg.hidden_dims, vec![16, 8]);
        assert_eq!(
            cfg.source,
            TaskSource::Gaussian {
                dim: 12,
                n_way: 4,
                k_shot: 2,
                q_queries: 6,
                mean_scale: 1.5,
                noise_sigma: 0.25,
            }
        );
        assert_eq!(cfg.eval_steps, vec![1, 3, 5]);
        assert!(cfg.trace_full_kappa);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.output_dir, PathBuf::from("out/twin"));
        assert_eq!(cfg.model_config(12).n_classes, 4);
    }

    #[test]
    fn csv_source_requires_both_paths_and_rejects_gaussian_knobs() {
        let ok = parse_train_config(
            "source = csv\nfeatures_csv = data/f.csv\nsplits_csv = data/s.csv\n",
        )
        .unwrap();
        assert!(matches!(ok.source, TaskSource::Csv { .. }));

        let missing = parse_train_config("source = csv\nfeatures_csv = f.csv\n").unwrap_err();
        assert!(missing.to_string().contains("splits_csv"), "{missing}");

        let mixed =
            parse_train_config("source = csv\nfeatures_csv = f.csv\nsplits_csv = s.csv\ndim = 4\n")
                .unwrap_err();
        assert!(mixed.to_string().contains("gaussian"), "{mixed}");

        let stray = parse_train_config("features_csv = f.csv\n").unwrap_err();
        assert!(stray.to_string().contains("csv"), "{stray}");
    }

    #[test]
    fn errors_carry_line_numbers_and_key_names() {
        let unknown = parse_train_config("alpha = 0.4\nwat = 1\n").unwrap_err();
        let msg = unknown.to_string();
        assert!(msg.contains("line 2") && msg.contains("wat"), "{msg}");

        let dup = parse_train_config("alpha = 0.4\nalpha = 0.5\n").unwrap_err();
        assert!(dup.to_string().contains("duplicate"), "{dup}");

        let form = parse_train_config("alpha 0.4\n").unwrap_err();
        assert!(form.to_string().contains("key = value"), "{form}");

        let typed = parse_train_config("k_steps = five\n").unwrap_err();
        assert!(typed.to_string().contains("k_steps"), "{typed}");

        let badbool = parse_train_config("conditioning = yes\n").unwrap_err();
        assert!(badbool.to_string().contains("true or false"), "{badbool}");
    }

    #[test]
    fn contradictory_and_degenerate_configs_are_rejected() {
        // Penalty weight without capture.
        let err = parse_train_config("gamma = 1.0\nconditioning = false\n").unwrap_err();
        assert!(err.to_string().contains("conditioning"), "{err}");

        assert!(parse_train_config("eval_steps = 5,3\n").is_err());
        assert!(parse_train_config("eval_steps = 1,1\n").is_err());
        assert!(parse_train_config("hidden = 32,0\n").is_err());
        assert!(parse_train_config("eval_every = 0\n").is_err());
        assert!(parse_train_config("alpha = 0\n").is_err());
        assert!(parse_train_config("n_way = 1\n").is_err());
    }

    #[test]
    fn gamma_zero_with_conditioning_off_is_a_valid_baseline() {
        let cfg = parse_train_config("gamma = 0\nconditioning = false\n").unwrap();
        assert!(!cfg.meta.conditioning_enabled);
        assert_eq!(cfg.meta.gamma, 0.0);
    }
}
