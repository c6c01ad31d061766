//! Reference merger implementations written independently of the library.

use loramerge::adapters::{AdapterCollection, LayerAdapters, LoraAdapter};
use loramerge::linalg::svd;
use loramerge::mergers::LegoReweight;
use loramerge::rng::{keyed, tag};
use loramerge::Matrix;
use rand::Rng;

/// A collection of 1×1 layers where task `i` contributes exactly `values[i]`.
pub fn scalar_collection(base: f64, values: &[f64]) -> AdapterCollection {
    let tasks: Vec<String> = (0..values.len()).map(|i| format!("t{i}")).collect();
    let adapters = values
        .iter()
        .zip(&tasks)
        .map(|(&v, t)| {
            let b = Matrix::from_vec(1, 1, vec![v]).unwrap();
            let a = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
            LoraAdapter::new(t, "w", b, a, 1.0).unwrap()
        })
        .collect();
    let layer = LayerAdapters {
        base: Matrix::from_vec(1, 1, vec![base]).unwrap(),
        adapters,
    };
    AdapterCollection::new(vec!["w".into()], tasks, vec![layer]).unwrap()
}

pub fn oracle_trim(v: &[f64], trim: f64) -> Vec<f64> {
    let keep = ((1.0 - trim) * v.len() as f64).ceil() as usize;
    let mut kept = vec![false; v.len()];
    for _ in 0..keep.min(v.len()) {
        // Largest remaining magnitude, first index on ties.
        let mut best: Option<usize> = None;
        for i in 0..v.len() {
            if kept[i] {
                continue;
            }
            if best.is_none_or(|b| v[i].abs() > v[b].abs()) {
                best = Some(i);
            }
        }
        kept[best.unwrap()] = true;
    }
    v.iter().zip(&kept).map(|(&x, &k)| if k { x } else { 0.0 }).collect()
}

pub fn oracle_elect(col: &[f64]) -> f64 {
    let pos: f64 = col.iter().filter(|&&x| x > 0.0).sum();
    let neg: f64 = -col.iter().filter(|&&x| x < 0.0).sum::<f64>();
    let agree: Vec<f64> = if pos >= neg {
        col.iter().copied().filter(|&x| x > 0.0).collect()
    } else {
        col.iter().copied().filter(|&x| x < 0.0).collect()
    };
    if agree.is_empty() {
        0.0
    } else {
        agree.iter().sum::<f64>() / agree.len() as f64
    }
}

pub fn oracle_ties(tasks: &[Vec<f64>], trim: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = tasks.iter().map(|t| oracle_trim(t, trim)).collect();
    (0..tasks[0].len())
        .map(|c| oracle_elect(&trimmed.iter().map(|t| t[c]).collect::<Vec<_>>()))
        .collect()
}

pub fn oracle_knots(c: &AdapterCollection, lambda: f64, trim: f64, dare: Option<(f64, u64)>) -> Vec<Matrix> {
    c.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let d = layer.base.rows();
            let m = layer.base.cols();
            let deltas = layer.deltas();
            // Row-concatenate the updates.
            let n = deltas.len();
            let x = Matrix::from_fn(n * d, m, |r, j| deltas[r / d].get(r % d, j));
            let s = svd(&x).unwrap();
            let q = s.sigma.len();
            let blocks: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut v = Vec::with_capacity(d * q);
                    for r in 0..d {
                        for k in 0..q {
                            v.push(s.u.get(i * d + r, k) * s.sigma[k]);
                        }
                    }
                    if let Some((p, seed)) = dare {
                        let mut rng = keyed(seed, &[tag::DARE, i as u64, l as u64]);
                        for x in v.iter_mut() {
                            let u: f64 = rng.random();
                            *x = if u < p { 0.0 } else { *x / (1.0 - p) };
                        }
                    }
                    v
                })
                .collect();
            let merged = oracle_ties(&blocks, trim);
            Matrix::from_fn(d, m, |r, j| {
                let upd: f64 = (0..q).map(|k| merged[r * q + k] * s.v.get(j, k)).sum();
                layer.base.get(r, j) + lambda * upd
            })
        })
        .collect()
}

pub fn units(c: &AdapterCollection, l: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for ad in &c.layers[l].adapters {
        let s = ad.lora_alpha / ad.rank() as f64;
        for j in 0..ad.rank() {
            let mut u: Vec<f64> = (0..ad.a.rows()).map(|i| ad.a.get(i, j)).collect();
            u.extend((0..ad.b.rows()).map(|i| s * ad.b.get(i, j)));
            out.push(u);
        }
    }
    out
}

pub fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, following the documented draw
/// order and tie rules.
pub fn oracle_kmeans(pts: &[Vec<f64>], k: usize, seed: u64, layer: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = keyed(seed, &[tag::KMEANS, layer as u64]);
    let n = pts.len();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let dist: Vec<f64> = pts
            .iter()
            .map(|p| chosen.iter().map(|&c| d2(p, &pts[c])).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = dist.iter().sum();
        if total == 0.0 {
            chosen.push((0..n).find(|i| !chosen.contains(i)).unwrap());
            continue;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for i in 0..n {
            acc += dist[i];
            if acc > u && dist[i] > 0.0 {
                pick = i;
                break;
            }
        }
        chosen.push(pick);
    }
    let mut cent: Vec<Vec<f64>> = chosen.iter().map(|&i| pts[i].clone()).collect();
    let mut assign = vec![0; n];
    let mut prev = f64::INFINITY;
    for _ in 0..100 {
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let mut best = 0;
            for c in 1..k {
                if d2(&pts[i], &cent[c]) < d2(&pts[i], &cent[best]) {
                    best = c;
                }
            }
            assign[i] = best;
            dist[i] = d2(&pts[i], &cent[best]);
        }
        for c in 0..k {
            if !assign.contains(&c) {
                let mut far = 0;
                for i in 1..n {
                    if dist[i] > dist[far] {
                        far = i;
                    }
                }
                assign[far] = c;
                dist[far] = 0.0;
            }
        }
        for c in 0..k {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| assign[i] == c).map(|i| &pts[i]).collect();
            cent[c] = (0..pts[0].len())
                .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                .collect();
        }
        let inertia: f64 = (0..n).map(|i| d2(&pts[i], &cent[assign[i]])).sum();
        let stop = prev.is_finite() && (prev - inertia).abs() <= 1e-8 * prev;
        prev = inertia;
        if stop {
            break;
        }
    }
    (cent, assign)
}

pub fn oracle_lego(c: &AdapterCollection, k: usize, reweight: LegoReweight, seed: u64) -> Vec<Matrix> {
    (0..c.num_layers())
        .map(|l| {
            let layer = &c.layers[l];
            let (d, m) = layer.base.shape();
            let pts = units(c, l);
            let (mut cent, assign) = oracle_kmeans(&pts, k, seed, l);
            for (ci, mu) in cent.iter_mut().enumerate() {
                match reweight {
                    LegoReweight::Parameter => {
                        let norms: Vec<f64> = (0..pts.len())
                            .filter(|&i| assign[i] == ci)
                            .map(|i| d2(&pts[i], &vec![0.0; pts[i].len()]).sqrt())
                            .collect();
                        let target = norms.iter().sum::<f64>() / norms.len() as f64;
                        let cur = d2(mu, &vec![0.0; mu.len()]).sqrt();
                        mu.iter_mut().for_each(|x| *x *= target / cur);
                    }
                    LegoReweight::Output => {
                        let rbar = layer.adapters.iter().map(|a| a.rank() as f64).sum::<f64>() / layer.adapters.len() as f64;
                        for x in &mut mu[m..] {
                            *x *= (rbar / k as f64).sqrt();
                        }
                    }
                }
            }
            // ΔW = Σ_c b_c a_cᵀ
            Matrix::from_fn(d, m, |i, j| cent.iter().map(|mu| mu[m + i] * mu[j]).sum())
        })
        .collect()
}

