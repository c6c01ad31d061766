//! Baseline mergers. Each maps an `AdapterCollection` to merged per-layer
//! weights; the factor-space mergers (Linear, SVD, LoRA-LEGO) also return the
//! merged low-rank factors.

mod knots;
mod lego;
mod ties;

pub use knots::{merge_knots, KnotsInner};
pub use lego::{kmeans, kmeans_pp_init, merge_lora_lego, semantic_units, KMeans, LegoReweight};
pub use ties::{dare_drop, elect_and_mean, ties_vectors, trim_top};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterCollection;
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

pub const DEFAULT_TA_LAMBDA: f64 = 0.3;

/// A merged low-rank update `ΔW = B Aᵀ` with any scale already folded into `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    pub b: Matrix,
    pub a: Matrix,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn delta(&self) -> Matrix {
        self.b.matmul_t(&self.a)
    }
}

fn apply_updates(coll: &AdapterCollection, updates: &[LowRank]) -> Vec<Matrix> {
    coll.layers
        .iter()
        .zip(updates)
        .map(|(layer, up)| {
            let mut w = layer.base.clone();
            w.add_scaled(&up.delta(), 1.0);
            w
        })
        .collect()
}

/// `W₀ + λ Σ_i ΔW_i`
pub fn merge_ta(coll: &AdapterCollection, lambda: f64) -> Result<Vec<Matrix>> {
    Ok(coll
        .layers
        .iter()
        .map(|layer| {
            let mut sum = Matrix::zeros(layer.base.rows(), layer.base.cols());
            for delta in layer.deltas() {
                sum.add_scaled(&delta, 1.0);
            }
            let mut w = layer.base.clone();
            w.add_scaled(&sum, lambda);
            w
        })
        .collect())
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::invalid(format!("{name} = {v} must lie in [0, 1)")));
    }
    Ok(())
}

fn ties_layers(coll: &AdapterCollection, lambda: f64, trim: f64, dare: Option<(f64, u64)>) -> Result<Vec<Matrix>> {
    check_fraction("trim_fraction", trim)?;
    if let Some((p, _)) = dare {
        check_fraction("drop_prob", p)?;
    }
    coll.layers
        .par_iter()
        .enumerate()
        .map(|(l, layer)| {
            let tasks: Vec<Vec<f64>> = layer
                .deltas()
                .into_iter()
                .enumerate()
                .map(|(i, d)| match dare {
                    Some((p, seed)) => dare_drop(d.data(), p, seed, i, l),
                    None => d.into_data(),
                })
                .collect();
            let merged = Matrix::from_vec(layer.base.rows(), layer.base.cols(), ties_vectors(&tasks, trim))?;
            let mut w = layer.base.clone();
            w.add_scaled(&merged, lambda);
            Ok(w)
        })
        .collect()
}

/// Per-task magnitude trim within each layer, mass-weighted sign election,
/// disjoint mean, then `W₀ + λ · merged`.
pub fn merge_ties(coll: &AdapterCollection, lambda: f64, trim_fraction: f64) -> Result<Vec<Matrix>> {
    ties_layers(coll, lambda, trim_fraction, None)
}

/// DARE drop-and-rescale on every `ΔW_i`, then TIES.
pub fn merge_dare_ties(
    coll: &AdapterCollection,
    lambda: f64,
    trim_fraction: f64,
    drop_prob: f64,
    seed: u64,
) -> Result<Vec<Matrix>> {
    ties_layers(coll, lambda, trim_fraction, Some((drop_prob, seed)))
}

/// Task arithmetic in factor space: `B = λ Σ s_i B_i`, `A = Σ A_i`.
pub fn merge_linear(coll: &AdapterCollection, lambda: f64) -> Result<Vec<LowRank>> {
    coll.layers
        .iter()
        .zip(&coll.layer_ids)
        .map(|(layer, lid)| {
            let r = layer.adapters[0].rank();
            if layer.adapters.iter().any(|a| a.rank() != r) {
                return Err(Error::invalid(format!("linear merge needs uniform rank (layer {lid})")));
            }
            let (d, m) = layer.base.shape();
            let mut b = Matrix::zeros(d, r);
            let mut a = Matrix::zeros(m, r);
            for ad in &layer.adapters {
                b.add_scaled(&ad.b, lambda * ad.scale());
                a.add_scaled(&ad.a, 1.0);
            }
            Ok(LowRank { b, a })
        })
        .collect()
}

/// Truncated SVD of `λ Σ ΔW_i`: `B = U_r Σ_r`, `A = V_r`.
pub fn merge_svd(coll: &AdapterCollection, lambda: f64, target_rank: usize) -> Result<Vec<LowRank>> {
    coll.layers
        .iter()
        .map(|layer| {
            let (d, m) = layer.base.shape();
            if target_rank == 0 || target_rank > d.min(m) {
                return Err(Error::invalid(format!("target_rank {target_rank} outside 1..={}", d.min(m))));
            }
            let mut sum = Matrix::zeros(d, m);
            for delta in layer.deltas() {
                sum.add_scaled(&delta, lambda);
            }
            let s = svd(&sum)?;
            let b = Matrix::from_fn(d, target_rank, |i, k| s.u.get(i, k) * s.sigma[k]);
            let a = Matrix::from_fn(m, target_rank, |i, k| s.v.get(i, k));
            Ok(LowRank { b, a })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ta,
    Ties,
    DareTies,
    Linear,
    Svd,
    KnotsTies,
    KnotsDareTies,
    LoraLego,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ta,
        Method::Ties,
        Method::DareTies,
        Method::Linear,
        Method::Svd,
        Method::KnotsTies,
        Method::KnotsDareTies,
        Method::LoraLego,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ta => "ta",
            Method::Ties => "ties",
            Method::DareTies => "dare_ties",
            Method::Linear => "linear",
            Method::Svd => "svd",
            Method::KnotsTies => "knots_ties",
            Method::KnotsDareTies => "knots_dare_ties",
            Method::LoraLego => "lora_lego",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        let s = s.replace('-', "_");
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    fn uses_lambda(self) -> bool {
        self != Method::LoraLego
    }

    fn uses_trim(self) -> bool {
        matches!(self, Method::Ties | Method::DareTies | Method::KnotsTies | Method::KnotsDareTies)
    }

    fn uses_drop(self) -> bool {
        matches!(self, Method::DareTies | Method::KnotsDareTies)
    }

    fn uses_seed(self) -> bool {
        self.uses_drop() || self == Method::LoraLego
    }
}

/// Merger settings. Only the parameters relevant to `method` may be set;
/// missing ones take the defaults in [`MergeConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trim_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_clusters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lego_reweight: Option<LegoReweight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
}

impl MergeConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: None,
            trim_fraction: None,
            drop_prob: None,
            k_clusters: None,
            lego_reweight: None,
            rng_seed: None,
            target_rank: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let checks = [
            ("lambda", self.lambda.is_some(), m.uses_lambda()),
            ("trim_fraction", self.trim_fraction.is_some(), m.uses_trim()),
            ("drop_prob", self.drop_prob.is_some(), m.uses_drop()),
            ("k_clusters", self.k_clusters.is_some(), m == Method::LoraLego),
            ("lego_reweight", self.lego_reweight.is_some(), m == Method::LoraLego),
            ("rng_seed", self.rng_seed.is_some(), m.uses_seed()),
            ("target_rank", self.target_rank.is_some(), m == Method::Svd),
        ];
        if let Some((name, ..)) = checks.iter().find(|(_, set, used)| *set && !*used) {
            return Err(Error::invalid(format!("{name} does not apply to method {}", m.name())));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() {
                return Err(Error::invalid("lambda must be finite"));
            }
        }
        if let Some(t) = self.trim_fraction {
            check_fraction("trim_fraction", t)?;
        }
        if let Some(p) = self.drop_prob {
            check_fraction("drop_prob", p)?;
        }
        if self.k_clusters == Some(0) || self.target_rank == Some(0) {
            return Err(Error::invalid("k_clusters and target_rank must be positive"));
        }
        Ok(())
    }

    /// Fills every parameter the method uses. `default_rank` is the adapter
    /// rank, used for SVD's target rank and LEGO's cluster count.
    pub fn resolved(&self, default_rank: usize) -> MergeConfig {
        let m = self.method;
        let mut out = MergeConfig::new(m);
        if m.uses_lambda() {
            out.lambda = Some(self.lambda.unwrap_or(match m {
                Method::Ties | Method::DareTies | Method::KnotsTies | Method::KnotsDareTies => 1.0,
                _ => DEFAULT_TA_LAMBDA,
            }));
        }
        if m.uses_trim() {
            out.trim_fraction = Some(self.trim_fraction.unwrap_or(0.8));
        }
        if m.uses_drop() {
            out.drop_prob = Some(self.drop_prob.unwrap_or(0.5));
        }
        if m.uses_seed() {
            out.rng_seed = Some(self.rng_seed.unwrap_or(0));
        }
        if m == Method::LoraLego {
            out.k_clusters = Some(self.k_clusters.unwrap_or(default_rank));
            out.lego_reweight = Some(self.lego_reweight.unwrap_or(LegoReweight::Output));
        }
        if m == Method::Svd {
            out.target_rank = Some(self.target_rank.unwrap_or(default_rank));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct MergeOutput {
    pub config: MergeConfig,
    pub weights: Vec<Matrix>,
    /// Present for the factor-space mergers.
    pub factors: Option<Vec<LowRank>>,
}

fn max_rank(coll: &AdapterCollection) -> usize {
    coll.layers
        .iter()
        .flat_map(|l| l.adapters.iter().map(|a| a.rank()))
        .max()
        .unwrap_or(1)
}

/// Runs the configured merger with defaults filled in.
pub fn merge(coll: &AdapterCollection, cfg: &MergeConfig) -> Result<MergeOutput> {
    cfg.validate()?;
    if coll.num_tasks() == 0 {
        return Err(Error::invalid("no adapters to merge"));
    }
    let c = cfg.resolved(max_rank(coll));
    let lambda = c.lambda.unwrap_or(0.0);
    let trim = c.trim_fraction.unwrap_or(0.0);
    let p = c.drop_prob.unwrap_or(0.0);
    let seed = c.rng_seed.unwrap_or(0);
    let (weights, factors) = match c.method {
        Method::Ta => (merge_ta(coll, lambda)?, None),
        Method::Ties => (merge_ties(coll, lambda, trim)?, None),
        Method::DareTies => (merge_dare_ties(coll, lambda, trim, p, seed)?, None),
        Method::KnotsTies => (merge_knots(coll, lambda, KnotsInner::Ties { trim_fraction: trim })?, None),
        Method::KnotsDareTies => (
            merge_knots(
                coll,
                lambda,
                KnotsInner::DareTies {
                    trim_fraction: trim,
                    drop_prob: p,
                    seed,
                },
            )?,
            None,
        ),
        Method::Linear => {
            let f = merge_linear(coll, lambda)?;
            (apply_updates(coll, &f), Some(f))
        }
        Method::Svd => {
            let f = merge_svd(coll, lambda, c.target_rank.unwrap_or(1))?;
            (apply_updates(coll, &f), Some(f))
        }
        Method::LoraLego => {
            let f = merge_lora_lego(
                coll,
                c.k_clusters.unwrap_or(1),
                c.lego_reweight.unwrap_or(LegoReweight::Output),
                seed,
            )?;
            (apply_updates(coll, &f), Some(f))
        }
    };
    Ok(MergeOutput {
        config: c,
        weights,
        factors,
    })
}

/// Candidate values per hyperparameter; empty lists leave that parameter at
/// its configured value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub lambda: Vec<f64>,
    pub trim_fraction: Vec<f64>,
    pub k_clusters: Vec<usize>,
}

fn steps(from: f64, to: f64, step: f64) -> Vec<f64> {
    let n = ((to - from) / step).round() as usize;
    (0..=n).map(|i| ((from + i as f64 * step) * 10.0).round() / 10.0).collect()
}

impl Grid {
    /// The usual search space for each method.
    pub fn standard(method: Method) -> Grid {
        match method {
            Method::Ta | Method::Linear | Method::Svd => Grid {
                lambda: steps(0.1, 1.0, 0.1),
                ..Default::default()
            },
            Method::Ties | Method::DareTies | Method::KnotsTies | Method::KnotsDareTies => Grid {
                lambda: steps(0.8, 1.8, 0.1),
                trim_fraction: steps(0.1, 0.9, 0.1),
                ..Default::default()
            },
            Method::LoraLego => Grid {
                k_clusters: vec![8, 16, 32, 64, 128],
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: MergeConfig,
    pub best_score: f64,
    /// Every evaluated configuration with its score, in grid order.
    pub trials: Vec<(MergeConfig, f64)>,
}

/// Exhaustive search maximizing `score`. Configurations the collection
/// cannot support (e.g. more clusters than units) are skipped. The first
/// best wins ties.
pub fn grid_search(
    coll: &AdapterCollection,
    base: &MergeConfig,
    grid: &Grid,
    score: impl Fn(&[Matrix]) -> Result<f64> + Sync,
) -> Result<GridResult> {
    let one = |v: Option<f64>| v.map(|x| vec![x]).unwrap_or_else(|| vec![f64::NAN]);
    let lambdas = if grid.lambda.is_empty() { one(base.lambda) } else { grid.lambda.clone() };
    let trims = if grid.trim_fraction.is_empty() { one(base.trim_fraction) } else { grid.trim_fraction.clone() };
    let ks: Vec<Option<usize>> = if grid.k_clusters.is_empty() {
        vec![base.k_clusters]
    } else {
        grid.k_clusters.iter().map(|&k| Some(k)).collect()
    };
    let mut candidates = Vec::new();
    for &l in &lambdas {
        for &t in &trims {
            for &k in &ks {
                let mut c = base.clone();
                c.lambda = if l.is_nan() { base.lambda } else { Some(l) };
                c.trim_fraction = if t.is_nan() { base.trim_fraction } else { Some(t) };
                c.k_clusters = k;
                candidates.push(c);
            }
        }
    }
    let scored: Vec<Option<(MergeConfig, f64)>> = candidates
        .into_par_iter()
        .map(|c| match merge(coll, &c) {
            Ok(out) => score(&out.weights).map(|s| Some((out.config, s))),
            Err(Error::Invalid(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let trials: Vec<(MergeConfig, f64)> = scored.into_iter().flatten().collect();
    let (best, best_score) = trials
        .iter()
        .fold(None::<&(MergeConfig, f64)>, |acc, t| match acc {
            Some(a) if a.1 >= t.1 => Some(a),
            _ => Some(t),
        })
        .cloned()
        .ok_or_else(|| Error::invalid("grid search evaluated no valid configuration"))?;
    Ok(GridResult {
        best,
        best_score,
        trials,
    })
}
