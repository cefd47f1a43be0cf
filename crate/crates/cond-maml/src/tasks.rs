//! Few-shot episode construction and the two-dimensional quadratic demo.
//!
//! An episode ([`Task`]) is a self-contained N-way classification problem:
//! `N*K` labeled support rows to adapt on and `N*Q` query rows to score the
//! adaptation. Labels are episode-local — whatever the source classes were,
//! the i-th drawn class becomes label `i`.
//!
//! Two sources produce episodes. [`GaussianTaskGen`] synthesizes clusters
//! with a tunable noise/separation dial, giving an endless task distribution
//! with a known nearest-centroid reference. [`CsvDataset`] ingests a feature
//! table plus a sidecar assigning every class to one of three disjoint
//! splits, so train/val/test episodes never share classes.
//!
//! [`QuadraticProblem`] is unrelated to episodes: it is the classic
//! ill-conditioned bowl `f(theta) = theta' A theta / 2` used to demonstrate
//! why gradient descent stalls when the spectrum of `A` is spread. Its
//! descent loop runs through the autodiff graph, so it doubles as an
//! integration test of the tape.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// One few-shot episode with episode-local labels in `0..n_way`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
}

impl Task {
    /// Checks the episode contract: shapes line up and every class appears
    /// exactly `k_shot` times in support and `q_queries` times in query.
    pub fn validate(&self) -> Result<()> {
        let (n, k, q) = (self.n_way, self.k_shot, self.q_queries);
        let check = |name: &str, x: &Tensor, y: &[usize], per_class: usize| -> Result<()> {
            if x.shape().len() != 2 || x.shape()[0] != n * per_class || y.len() != n * per_class {
                return Err(Error::Domain {
                    op: "task",
                    msg: format!(
                        "{name}: expected {} rows of features and labels, got shape {:?} with {} labels",
                        n * per_class,
                        x.shape(),
                        y.len()
                    ),
                });
            }
            let mut hist = vec![0usize; n];
            for &label in y {
                if label >= n {
                    return Err(Error::Domain {
                        op: "task",
                        msg: format!("{name}: label {label} outside 0..{n}"),
                    });
                }
                hist[label] += 1;
            }
            if hist.iter().any(|&c| c != per_class) {
                return Err(Error::Domain {
                    op: "task",
                    msg: format!("{name}: class histogram {hist:?} != uniform {per_class}"),
                });
            }
            Ok(())
        };
        check("support", &self.support_x, &self.support_y, k)?;
        check("query", &self.query_x, &self.query_y, q)
    }

    pub fn dim(&self) -> usize {
        self.support_x.shape()[1]
    }
}

/// Deterministic per-episode generator seed, as used by the parallel
/// evaluator: episode `i` of a run seeded with `s` always sees the same
/// stream regardless of which worker runs it.
pub fn derived_rng(seed: u64, episode_index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed ^ episode_index)
}

/// Synthetic episode source: class centers drawn uniformly from a ball of
/// radius `mean_scale`, samples scattered around them with isotropic noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTaskGen {
    pub dim: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub mean_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GaussianTaskGen {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_way < 2 || self.k_shot == 0 || self.q_queries == 0 {
            return Err(Error::InvalidArgument(format!(
                "gaussian generator: need dim>0, n_way>=2, k_shot>0, q_queries>0, got d={} N={} K={} Q={}",
                self.dim, self.n_way, self.k_shot, self.q_queries
            )));
        }
        if !(self.mean_scale > 0.0) || !(self.noise_sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian generator: mean_scale and noise_sigma must be positive, got {} and {}",
                self.mean_scale, self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Draws one episode. Pure function of the generator config and the rng
    /// state: replaying the same stream reproduces the tensors bitwise.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Task> {
        self.validate()?;
        let (n, k, q, d) = (self.n_way, self.k_shot, self.q_queries, self.dim);

        // Uniform in the ball: Gaussian direction, radius ~ R * U^(1/d).
        let mut centers = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            let radius = self.mean_scale * rng.gen::<f64>().powf(1.0 / d as f64);
            for x in &mut v {
                *x *= radius / norm;
            }
            centers.push(v);
        }

        let mut scatter = |per_class: usize| -> (Tensor, Vec<usize>) {
            let mut rows = Vec::with_capacity(n * per_class * d);
            let mut labels = Vec::with_capacity(n * per_class);
            for (c, center) in centers.iter().enumerate() {
                for _ in 0..per_class {
                    for &m in center {
                        let noise: f64 = rng.sample(StandardNormal);
                        rows.push(m + self.noise_sigma * noise);
                    }
                    labels.push(c);
                }
            }
            (Tensor::from_raw(vec![n * per_class, d], rows), labels)
        };
        let (support_x, support_y) = scatter(k);
        let (query_x, query_y) = scatter(q);

        let task = Task {
            support_x,
            support_y,
            query_x,
            query_y,
            n_way: n,
            k_shot: k,
            q_queries: q,
        };
        task.validate()?;
        Ok(task)
    }
}

/// Which disjoint class pool an episode draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, val, or test)"
            ))),
        }
    }
}

/// A feature table with class-disjoint train/val/test pools.
///
/// Two files define a dataset. The feature file has a header
/// `f0,f1,...,f{d-1},label` followed by one row per sample. The sidecar has a
/// header `class_id,split` and assigns *every* class appearing in the feature
/// file to exactly one split.
#[derive(Clone, Debug)]
pub struct CsvDataset {
    features: Tensor,
    labels: Vec<usize>,
    split_of: BTreeMap<usize, Split>,
    by_class: BTreeMap<usize, Vec<usize>>,
    dim: usize,
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    if err.is_io_error() {
        match err.into_kind() {
            csv::ErrorKind::Io(e) => Error::Io(e),
            _ => unreachable!("is_io_error guaranteed an io kind"),
        }
    } else {
        Error::Config(format!("{}: {err}", path.display()))
    }
}

impl CsvDataset {
    pub fn load(features_path: &Path, split_path: &Path) -> Result<CsvDataset> {
        let mut reader =
            csv::Reader::from_path(features_path).map_err(|e| csv_error(features_path, e))?;
        let headers = reader
            .headers()
            .map_err(|e| csv_error(features_path, e))?
            .clone();
        if headers.len() < 2 || &headers[headers.len() - 1] != "label" {
            return Err(Error::Config(format!(
                "{}: expected header f0,...,f{{d-1}},label",
                features_path.display()
            )));
        }
        let dim = headers.len() - 1;
        for (i, h) in headers.iter().take(dim).enumerate() {
            if h != format!("f{i}") {
                return Err(Error::Config(format!(
                    "{}: feature column {i} is named {h:?}, expected \"f{i}\"",
                    features_path.display()
                )));
            }
        }

        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(features_path, e))?;
            let complain = |what: &str| {
                Error::Config(format!(
                    "{} row {}: {what}",
                    features_path.display(),
                    line + 2
                ))
            };
            if record.len() != dim + 1 {
                return Err(complain(&format!(
                    "has {} fields, expected {}",
                    record.len(),
                    dim + 1
                )));
            }
            for field in record.iter().take(dim) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| complain(&format!("feature {field:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(complain(&format!("feature {field:?} is not finite")));
                }
                rows.push(v);
            }
            let label: usize = record[dim]
                .parse()
                .map_err(|_| complain(&format!("label {:?} is not a class id", &record[dim])))?;
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(Error::Config(format!(
                "{}: no data rows",
                features_path.display()
            )));
        }

        let mut split_reader =
            csv::Reader::from_path(split_path).map_err(|e| csv_error(split_path, e))?;
        let sh = split_reader
            .headers()
            .map_err(|e| csv_error(split_path, e))?
            .clone();
        if sh.len() != 2 || &sh[0] != "class_id" || &sh[1] != "split" {
            return Err(Error::Config(format!(
                "{}: expected header class_id,split",
                split_path.display()
            )));
        }
        let mut split_of = BTreeMap::new();
        for record in split_reader.records() {
            let record = record.map_err(|e| csv_error(split_path, e))?;
            let class: usize = record[0].parse().map_err(|_| {
                Error::Config(format!(
                    "{}: class id {:?} is not an integer",
                    split_path.display(),
                    &record[0]
                ))
            })?;
            let split: Split = record[1].parse()?;
            if split_of.insert(class, split).is_some() {
                return Err(Error::Config(format!(
                    "{}: class {class} assigned to more than one split",
                    split_path.display()
                )));
            }
        }

        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &label) in labels.iter().enumerate() {
            by_class.entry(label).or_default().push(row);
        }
        for class in by_class.keys() {
            if !split_of.contains_key(class) {
                return Err(Error::Config(format!(
                    "{}: class {class} has data rows but no split assignment",
                    split_path.display()
                )));
            }
        }
        for class in split_of.keys() {
            if !by_class.contains_key(class) {
                return Err(Error::Config(format!(
                    "{}: class {class} is assigned a split but has no data rows",
                    split_path.display()
                )));
            }
        }

        let n_rows = labels.len();
        Ok(CsvDataset {
            features: Tensor::from_raw(vec![n_rows, dim], rows),
            labels,
            split_of,
            by_class,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    /// Class ids belonging to `split`, ascending.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        self.split_of
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(c, _)| *c)
            .collect()
    }

    /// Draws an N-way K-shot episode from one split: N classes without
    /// replacement, then K+Q distinct rows per class, the first K as support.
    pub fn sample_episode(
        &self,
        split: Split,
        n_way: usize,
        k_shot: usize,
        q_queries: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Task> {
        if n_way < 2 || k_shot == 0 || q_queries == 0 {
            return Err(Error::InvalidArgument(format!(
                "episode shape: need n_way>=2, k_shot>0, q_queries>0, got N={n_way} K={k_shot} Q={q_queries}"
            )));
        }
        let classes = self.classes_in(split);
        if classes.len() < n_way {
            return Err(Error::InvalidArgument(format!(
                "split {split} has {} classes, episode needs {n_way}",
                classes.len()
            )));
        }
        let picks = rand::seq::index::sample(rng, classes.len(), n_way);
        let chosen: Vec<usize> = picks.iter().map(|i| classes[i]).collect();

        let per_class = k_shot + q_queries;
        let mut support_rows = Vec::with_capacity(n_way * k_shot);
        let mut query_rows = Vec::with_capacity(n_way * q_queries);
        for &class in &chosen {
            let rows = &self.by_class[&class];
            if rows.len() < per_class {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has {} rows, episode needs {per_class}",
                    rows.len()
                )));
            }
            let idx = rand::seq::index::sample(rng, rows.len(), per_class);
            for (j, i) in idx.iter().enumerate() {
                if j < k_shot {
                    support_rows.push(rows[i]);
                } else {
                    query_rows.push(rows[i]);
                }
            }
        }

        let gather = |row_ids: &[usize], per_class: usize| -> (Tensor, Vec<usize>) {
            let mut data = Vec::with_capacity(row_ids.len() * self.dim);
            let mut labels = Vec::with_capacity(row_ids.len());
            for (j, &row) in row_ids.iter().enumerate() {
                let start = row * self.dim;
                data.extend_from_slice(&self.features.data()[start..start + self.dim]);
                labels.push(j / per_class);
            }
            (
                Tensor::from_raw(vec![row_ids.len(), self.dim], data),
                labels,
            )
        };
        let (support_x, support_y) = gather(&support_rows, k_shot);
        let (query_x, query_y) = gather(&query_rows, q_queries);

        let task = Task {
            support_x,
            support_y,
            query_x,
            query_y,
            n_way,
            k_shot,
            q_queries,
        };
        task.validate()?;
        Ok(task)
    }
}

/// The two-dimensional ill-conditioned bowl: `f(theta) = theta' A theta / 2`
/// with `A` symmetric positive definite, minimized at the origin.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    pub a: Tensor,
    pub theta0: Tensor,
    pub kappa: f64,
}

/// Builds the demo problem for a target condition number: eigenvalues
/// `{s, s*kappa}` with `s = min(1, 2/kappa)`, rotated by 30 degrees so the
/// ill-conditioning is not axis-aligned. The scaling pins the largest
/// eigenvalue at 2 for kappa >= 2, which keeps the classic learning rate 0.5
/// stable (step factor `|1 - 0.5*lambda| < 1`) for every kappa.
pub fn quadratic_problem(kappa: f64) -> Result<QuadraticProblem> {
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::Domain {
            op: "quadratic",
            msg: format!("condition number target must be >= 1, got {kappa}"),
        });
    }
    let s = (2.0 / kappa).min(1.0);
    let (l1, l2) = (s, s * kappa);
    let angle = std::f64::consts::PI / 6.0;
    let (c, sn) = (angle.cos(), angle.sin());
    // A = R diag(l1, l2) R', written out so the matrix is symmetric bitwise.
    let a = Tensor::new(
        vec![2, 2],
        vec![
            c * c * l1 + sn * sn * l2,
            c * sn * (l1 - l2),
            c * sn * (l1 - l2),
            sn * sn * l1 + c * c * l2,
        ],
    )?;
    let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
    Ok(QuadraticProblem {
        a,
        theta0: Tensor::new(vec![2], vec![inv_sqrt2, inv_sqrt2])?,
        kappa,
    })
}

impl QuadraticProblem {
    /// The loss node `theta' A theta / 2` for a `[2, 1]` parameter node.
    pub fn loss_node(&self, g: &mut Graph, theta: NodeId) -> Result<NodeId> {
        let a = g.constant(self.a.clone());
        let a_theta = g.matmul(a, theta)?;
        let quad = g.matmul_flags(theta, a_theta, true, false)?;
        let scalar = g.reshape(quad, &[])?;
        g.scale(scalar, 0.5)
    }

    /// Loss value at a `[2]` point, computed without a graph.
    pub fn loss_value(&self, theta: &Tensor) -> f64 {
        let t = theta.data();
        let a = self.a.data();
        0.5 * (t[0] * (a[0] * t[0] + a[1] * t[1]) + t[1] * (a[2] * t[0] + a[3] * t[1]))
    }

    /// Runs `steps` iterations of gradient descent from `theta0`, each
    /// gradient obtained from the autodiff graph. Returns the `steps + 1`
    /// iterates including the start point.
    pub fn gd_trajectory(&self, lr: f64, steps: usize) -> Result<Vec<Tensor>> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "quadratic demo: learning rate must be positive, got {lr}"
            )));
        }
        let mut current = Tensor::new(vec![2, 1], self.theta0.data().to_vec())?;
        let mut out = vec![self.theta0.clone()];
        for _ in 0..steps {
            let mut g = Graph::new();
            let theta = g.parameter(current.clone());
            let loss = self.loss_node(&mut g, theta)?;
            let grad = g.gradient(loss, &[theta], false)?[0];
            let stepped: Vec<f64> = current
                .data()
                .iter()
                .zip(g.value(grad).data())
                .map(|(t, d)| t - lr * d)
                .collect();
            current = Tensor::new(vec![2, 1], stepped)?;
            out.push(Tensor::new(vec![2], current.data().to_vec())?);
        }
        Ok(out)
    }
}
