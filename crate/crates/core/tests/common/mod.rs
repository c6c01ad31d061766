#![allow(dead_code)]

pub mod fd;
pub mod oracles;

use loramerge::adapters::{AdapterCollection, LayerAdapters, LoraAdapter};
use loramerge::harness::{generate_suite, train_suite, FinetuneConfig, SuiteConfig, TrainedSuite};
use loramerge::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Random collection with the given `(d, m)` layer shapes and per-task ranks.
pub fn random_collection(seed: u64, shapes: &[(usize, usize)], ranks: &[usize]) -> AdapterCollection {
    let mut r = rng(seed);
    let task_ids: Vec<String> = (0..ranks.len()).map(|t| format!("t{t}")).collect();
    let layer_ids: Vec<String> = (0..shapes.len()).map(|l| format!("l{l}")).collect();
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(l, &(d, m))| LayerAdapters {
            base: gaussian(&mut r, d, m),
            adapters: ranks
                .iter()
                .enumerate()
                .map(|(t, &rk)| {
                    let b = gaussian(&mut r, d, rk);
                    let a = gaussian(&mut r, m, rk);
                    let alpha = rk as f64 * r.random_range(0.5..2.0);
                    LoraAdapter::new(&task_ids[t], &layer_ids[l], b, a, alpha).unwrap()
                })
                .collect(),
        })
        .collect();
    AdapterCollection::new(layer_ids, task_ids, layers).unwrap()
}

pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let mut d = a.clone();
    d.add_scaled(b, -1.0);
    d.frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The default toy suite trained at `seed`.
pub fn trained_default(seed: u64) -> TrainedSuite {
    trained(
        SuiteConfig {
            seed,
            ..Default::default()
        },
        FinetuneConfig {
            seed,
            ..Default::default()
        },
    )
}

pub fn trained(suite: SuiteConfig, ft: FinetuneConfig) -> TrainedSuite {
    train_suite(generate_suite(&suite).unwrap(), &ft).unwrap()
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Pool-adjacent-violators fit, non-decreasing when `increasing`, otherwise
/// non-increasing.
pub fn isotonic(y: &[f64], increasing: bool) -> Vec<f64> {
    let sign = if increasing { 1.0 } else { -1.0 };
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in y {
        blocks.push((sign * v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a / na as f64 <= b / nb as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (a + b, na + nb);
        }
    }
    blocks
        .iter()
        .flat_map(|&(s, n)| std::iter::repeat_n(sign * s / n as f64, n))
        .collect()
}
