//! Deterministic synthetic multi-task classification suites.
//!
//! Each task is a Gaussian mixture whose class means live in a low-dimensional
//! input subspace. Tasks share a few subspace directions, so their adapters
//! interfere when merged. Heads are only partly aligned with the frozen base,
//! leaving headroom that fine-tuning has to close.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::rng::{keyed, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    /// Input dimension `m`.
    pub in_dim: usize,
    /// Feature dimension `d` of every adapted layer.
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub adapt_samples: usize,
    /// Dimension of each task's class-mean subspace.
    pub subspace_dim: usize,
    /// How many of those dimensions all tasks share.
    pub shared_dims: usize,
    pub separation: f64,
    pub noise: f64,
    /// 0 gives random heads, 1 gives heads aligned with the base features.
    pub head_alignment: f64,
    pub head_scale: f64,
    /// Leading classes of every task that map to the same joint label.
    pub label_overlap: usize,
    /// `(source, copy)`: task `copy` reuses the distribution of task `source`.
    pub twins: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            in_dim: 24,
            hidden_dim: 32,
            n_layers: 1,
            classes: 5,
            train_samples: 400,
            eval_samples: 200,
            adapt_samples: 200,
            subspace_dim: 5,
            shared_dims: 2,
            separation: 4.0,
            noise: 1.0,
            head_alignment: 0.1,
            head_scale: 1.0,
            label_overlap: 0,
            twins: Vec::new(),
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_tasks", self.n_tasks),
            ("in_dim", self.in_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("classes", self.classes),
            ("train_samples", self.train_samples),
            ("eval_samples", self.eval_samples),
            ("adapt_samples", self.adapt_samples),
            ("subspace_dim", self.subspace_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.shared_dims > self.subspace_dim || self.subspace_dim > self.in_dim {
            return Err(Error::invalid("need shared_dims <= subspace_dim <= in_dim"));
        }
        if self.label_overlap > self.classes {
            return Err(Error::invalid("label_overlap exceeds class count"));
        }
        if !(0.0..=1.0).contains(&self.head_alignment) || self.noise < 0.0 || self.separation <= 0.0 {
            return Err(Error::invalid("head_alignment in [0,1], noise >= 0, separation > 0"));
        }
        for &(s, c) in &self.twins {
            if s >= self.n_tasks || c >= self.n_tasks || s == c || self.twins.iter().any(|&(_, c2)| c2 == s) {
                return Err(Error::invalid(format!("bad twin pair ({s}, {c})")));
            }
        }
        Ok(())
    }

    /// `(rows, cols)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        if l == 0 {
            (self.hidden_dim, self.in_dim)
        } else {
            (self.hidden_dim, self.hidden_dim)
        }
    }

    pub fn layer_ids(&self) -> Vec<String> {
        (0..self.n_layers).map(|l| format!("layer_{l}")).collect()
    }

    pub fn task_names(&self) -> Vec<String> {
        (0..self.n_tasks).map(|t| format!("task_{t}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    /// `C × d` classifier head.
    pub head: Matrix,
    /// Joint-label id of each local class.
    pub label_ids: Vec<usize>,
    pub train: Dataset,
    pub eval: Dataset,
    /// Labels present for bookkeeping only; merging never reads them.
    pub adapt: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub layer_ids: Vec<String>,
    /// Frozen base weight per layer, stored at 32-bit precision.
    pub base: Vec<Matrix>,
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("suite has no task {name}")))
    }

    /// Number of distinct joint labels.
    pub fn union_size(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| t.label_ids.iter())
            .max()
            .map_or(0, |&m| m + 1)
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Gram–Schmidt with re-orthogonalisation; drops nothing, the inputs are
/// Gaussian and full rank with probability one.
fn orthonormalize(mut vs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..vs.len() {
        for _ in 0..2 {
            for j in 0..i {
                let p = dot(&vs[i], &vs[j]);
                let (head, tail) = vs.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= p * b;
                }
            }
        }
        let n = norm(&vs[i]);
        vs[i].iter_mut().for_each(|v| *v /= n);
    }
    vs
}

/// Coordinates of the class means inside a task subspace of dimension `s`.
/// When `classes <= s` the means are the vertices of a randomly rotated
/// regular simplex (all pairwise distances `√2`); otherwise standard normal.
fn class_codes(rng: &mut impl Rng, classes: usize, s: usize) -> Vec<Vec<f64>> {
    if classes > s {
        return (0..classes).map(|_| gaussian(rng, s)).collect();
    }
    let frame = orthonormalize((0..classes).map(|_| gaussian(rng, s)).collect());
    (0..classes)
        .map(|cls| {
            let mut z = vec![0.0; s];
            for (j, f) in frame.iter().enumerate() {
                let coef = if j == cls { 1.0 } else { 0.0 } - 1.0 / classes as f64;
                for (zi, fi) in z.iter_mut().zip(f) {
                    *zi += coef * fi;
                }
            }
            z
        })
        .collect()
}

struct TaskDistribution {
    means: Vec<Vec<f64>>,
    head: Matrix,
    label_ids: Vec<usize>,
}

pub fn generate_suite(config: &SuiteConfig) -> Result<TaskSuite> {
    config.validate()?;
    let seed = config.seed;
    let (m, d, c) = (config.in_dim, config.hidden_dim, config.classes);

    let mut rng = keyed(seed, &[tag::SUITE, 0]);
    let base: Vec<Matrix> = (0..config.n_layers)
        .map(|l| {
            let (rows, cols) = config.layer_shape(l);
            let s = 1.0 / (cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| f32_round(s * rng.sample::<f64, _>(StandardNormal)))
        })
        .collect();
    let feature_map = base[1..].iter().fold(base[0].clone(), |acc, w| w.matmul(&acc));

    let mut rng = keyed(seed, &[tag::SUITE, 1]);
    let shared: Vec<Vec<f64>> = (0..config.shared_dims).map(|_| gaussian(&mut rng, m)).collect();

    let mut dists: Vec<Option<TaskDistribution>> = (0..config.n_tasks).map(|_| None).collect();
    let mut next_label = config.label_overlap;
    for t in 0..config.n_tasks {
        if config.twins.iter().any(|&(_, copy)| copy == t) {
            continue;
        }
        let mut rng = keyed(seed, &[tag::SUITE, 2, t as u64]);
        let mut basis = shared.clone();
        basis.extend((config.shared_dims..config.subspace_dim).map(|_| gaussian(&mut rng, m)));
        let basis = orthonormalize(basis);
        let codes = class_codes(&mut rng, c, config.subspace_dim);
        let means: Vec<Vec<f64>> = codes
            .iter()
            .map(|z| {
                let mut mu = vec![0.0; m];
                for (zk, b) in z.iter().zip(&basis) {
                    for (mi, bi) in mu.iter_mut().zip(b) {
                        *mi += config.separation * zk * bi;
                    }
                }
                mu
            })
            .collect();

        let feats: Vec<Vec<f64>> = means.iter().map(|mu| feature_map.mat_vec(mu)).collect();
        let centre: Vec<f64> = (0..d).map(|k| feats.iter().map(|f| f[k]).sum::<f64>() / c as f64).collect();
        let mut head = Matrix::zeros(c, d);
        for (cls, f) in feats.iter().enumerate() {
            let aligned: Vec<f64> = f.iter().zip(&centre).map(|(a, b)| a - b).collect();
            let na = norm(&aligned).max(f64::MIN_POSITIVE);
            let noise = gaussian(&mut rng, d);
            let nn = norm(&noise);
            let mut row: Vec<f64> = aligned
                .iter()
                .zip(&noise)
                .map(|(a, g)| config.head_alignment * a / na + (1.0 - config.head_alignment) * g / nn)
                .collect();
            let nr = norm(&row);
            row.iter_mut().for_each(|v| *v *= config.head_scale / nr);
            for (k, v) in row.into_iter().enumerate() {
                head.set(cls, k, v);
            }
        }

        let label_ids = (0..c)
            .map(|cls| {
                if cls < config.label_overlap {
                    cls
                } else {
                    next_label + cls - config.label_overlap
                }
            })
            .collect();
        next_label += c - config.label_overlap;
        dists[t] = Some(TaskDistribution { means, head, label_ids });
    }
    for &(source, copy) in &config.twins {
        let src = dists[source].as_ref().expect("source generated");
        dists[copy] = Some(TaskDistribution {
            means: src.means.clone(),
            head: src.head.clone(),
            label_ids: src.label_ids.clone(),
        });
    }

    let names = config.task_names();
    let tasks = dists
        .into_iter()
        .enumerate()
        .map(|(t, dist)| {
            let dist = dist.expect("every task generated");
            let sample = |split: u64, n: usize| {
                let mut rng = keyed(seed, &[tag::SUITE, 3, t as u64, split]);
                let y: Vec<usize> = (0..n).map(|i| i % c).collect();
                let x = Matrix::from_fn(n, m, |i, j| {
                    dist.means[y[i]][j] + config.noise * rng.sample::<f64, _>(StandardNormal)
                });
                Dataset { x, y }
            };
            Task {
                name: names[t].clone(),
                head: dist.head.clone(),
                label_ids: dist.label_ids.clone(),
                train: sample(0, config.train_samples),
                eval: sample(1, config.eval_samples),
                adapt: sample(2, config.adapt_samples),
            }
        })
        .collect();

    Ok(TaskSuite {
        config: config.clone(),
        layer_ids: config.layer_ids(),
        base,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_identical() {
        let cfg = SuiteConfig {
            seed: 3,
            ..Default::default()
        };
        assert_eq!(generate_suite(&cfg).unwrap(), generate_suite(&cfg).unwrap());
        let other = generate_suite(&SuiteConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(other.base, generate_suite(&SuiteConfig::default()).unwrap().base);
    }

    #[test]
    fn shapes_and_labels() {
        let cfg = SuiteConfig {
            n_layers: 2,
            label_overlap: 2,
            ..Default::default()
        };
        let s = generate_suite(&cfg).unwrap();
        assert_eq!(s.base[0].shape(), (32, 24));
        assert_eq!(s.base[1].shape(), (32, 32));
        assert_eq!(s.tasks[0].label_ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.tasks[1].label_ids, vec![0, 1, 5, 6, 7]);
        assert_eq!(s.union_size(), 2 + 4 * 3);
        assert_eq!(s.tasks[0].train.x.shape(), (400, 24));
        assert_ne!(s.tasks[0].train.x, s.tasks[0].eval.x);
    }

    #[test]
    fn twins_share_distribution() {
        let cfg = SuiteConfig {
            n_tasks: 3,
            twins: vec![(0, 2)],
            ..Default::default()
        };
        let s = generate_suite(&cfg).unwrap();
        assert_eq!(s.tasks[0].head, s.tasks[2].head);
        assert_eq!(s.tasks[0].label_ids, s.tasks[2].label_ids);
        assert_ne!(s.tasks[0].train.x, s.tasks[2].train.x);
        assert_eq!(s.union_size(), 10);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_suite(&SuiteConfig {
            n_tasks: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate_suite(&SuiteConfig {
            shared_dims: 9,
            ..Default::default()
        })
        .is_err());
    }
}
