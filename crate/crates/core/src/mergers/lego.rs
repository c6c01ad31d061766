//! LoRA-LEGO: pool every rank-1 unit of every task, cluster, and rebuild a
//! rank-`k` adapter from the centroids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LowRank;
use crate::adapters::AdapterCollection;
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::rng::{keyed, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LegoReweight {
    /// Rescale each centroid to the mean norm of its members.
    Parameter,
    /// Scale the merged update by `√r / √k`.
    Output,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_REL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; the lowest index wins ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = dist2(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding. The first centre is `random_range(0..n)`; each further
/// centre draws `u = random::<f64>() · ΣD²` and takes the first point whose
/// cumulative `D²` exceeds `u`. If every point already coincides with a
/// centre, the lowest unused index is taken without a draw.
pub fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > u && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].clone()).collect()
}

/// Lloyd iterations from k-means++ seeds. Stops after `KMEANS_MAX_ITERS` or
/// when inertia changes by less than `KMEANS_REL_TOL` relative. An empty
/// cluster is re-seeded with the point farthest from its current centroid
/// (lowest index on ties), processed in cluster order.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={} units", points.len())));
    }
    let dim = points[0].len();
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut assignment = vec![0; points.len()];
    let mut prev = f64::INFINITY;
    let mut inertia = 0.0;
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITERS {
        iterations = it + 1;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignment[i] = c;
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &c in &assignment {
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                counts[assignment[far]] -= 1;
                assignment[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&assignment) {
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (mu, (s, &n)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            *mu = s.iter().map(|v| v / n as f64).collect();
        }
        inertia = points.iter().zip(&assignment).map(|(p, &c)| dist2(p, &centroids[c])).sum();
        let done = prev.is_finite() && (prev - inertia).abs() <= KMEANS_REL_TOL * prev.max(f64::MIN_POSITIVE);
        prev = inertia;
        if done {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        inertia,
        iterations,
    })
}

/// Minimal semantic units of one layer, task-major: `[a_j; scale · b_j]`.
pub fn semantic_units(coll: &AdapterCollection, layer: usize) -> Vec<Vec<f64>> {
    coll.layers[layer]
        .adapters
        .iter()
        .flat_map(|ad| {
            let s = ad.scale();
            (0..ad.rank()).map(move |j| {
                let mut u = ad.a.col(j);
                u.extend(ad.b.col(j).iter().map(|v| v * s));
                u
            })
        })
        .collect()
}

/// Clusters the units of each layer into `k` centroids; centroid `c` becomes
/// column `c` of the merged `A` (first `m` entries) and `B` (remaining `d`).
pub fn merge_lora_lego(
    coll: &AdapterCollection,
    k: usize,
    reweight: LegoReweight,
    seed: u64,
) -> Result<Vec<LowRank>> {
    let mut out = Vec::with_capacity(coll.num_layers());
    for l in 0..coll.num_layers() {
        let layer = &coll.layers[l];
        let (d, m) = layer.base.shape();
        let units = semantic_units(coll, l);
        let mut rng = keyed(seed, &[tag::KMEANS, l as u64]);
        let km = kmeans(&units, k, &mut rng)?;
        let mut centroids = km.centroids;
        match reweight {
            LegoReweight::Parameter => {
                for (c, mu) in centroids.iter_mut().enumerate() {
                    let members: Vec<f64> = units
                        .iter()
                        .zip(&km.assignment)
                        .filter(|&(_, &a)| a == c)
                        .map(|(u, _)| norm(u))
                        .collect();
                    let target = members.iter().sum::<f64>() / members.len() as f64;
                    let n = norm(mu);
                    if n > 0.0 {
                        mu.iter_mut().for_each(|v| *v *= target / n);
                    }
                }
            }
            LegoReweight::Output => {
                let r = layer.adapters.iter().map(|a| a.rank()).sum::<usize>() as f64 / layer.adapters.len() as f64;
                let s = (r / k as f64).sqrt();
                for mu in &mut centroids {
                    mu[m..].iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let a = Matrix::from_fn(m, k, |i, c| centroids[c][i]);
        let b = Matrix::from_fn(d, k, |i, c| centroids[c][m + i]);
        out.push(LowRank { b, a });
    }
    Ok(out)
}
