//! Elementwise TIES (trim, elect, disjoint mean) and the DARE drop-and-rescale
//! pre-pass. Both operate on flat per-task vectors so KnOTS can reuse them.

use rand::Rng;

use crate::rng::{keyed, tag};

/// Zeroes all but the `ceil((1 - trim) · n)` entries of largest magnitude.
/// Equal magnitudes keep the lower index.
pub fn trim_top(values: &[f64], trim_fraction: f64) -> Vec<f64> {
    let n = values.len();
    let keep = ((1.0 - trim_fraction) * n as f64).ceil() as usize;
    if keep >= n {
        return values.to_vec();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    let mut out = vec![0.0; n];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    out
}

/// Sign election and disjoint mean over already-trimmed task vectors.
///
/// Per coordinate the sign with the larger summed magnitude wins (ties go
/// positive); surviving entries of that sign are averaged over the tasks that
/// contribute them. Coordinates with no contributor are zero.
pub fn elect_and_mean(trimmed: &[Vec<f64>]) -> Vec<f64> {
    let n = trimmed.first().map_or(0, Vec::len);
    (0..n)
        .map(|c| {
            let (mut pos, mut neg) = (0.0, 0.0);
            for t in trimmed {
                let v = t[c];
                if v > 0.0 {
                    pos += v;
                } else if v < 0.0 {
                    neg -= v;
                }
            }
            let positive = pos >= neg;
            let (mut sum, mut count) = (0.0, 0usize);
            for t in trimmed {
                let v = t[c];
                if (positive && v > 0.0) || (!positive && v < 0.0) {
                    sum += v;
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Full TIES on flat task vectors, without the final `λ` scaling.
pub fn ties_vectors(tasks: &[Vec<f64>], trim_fraction: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = tasks.iter().map(|t| trim_top(t, trim_fraction)).collect();
    elect_and_mean(&trimmed)
}

/// Drops each entry with probability `p` and rescales survivors by `1/(1-p)`.
/// The stream is keyed by `(seed, task, layer)` and consumed one uniform draw
/// per entry in index order.
pub fn dare_drop(values: &[f64], p: f64, seed: u64, task: usize, layer: usize) -> Vec<f64> {
    let mut rng = keyed(seed, &[tag::DARE, task as u64, layer as u64]);
    let keep_scale = 1.0 / (1.0 - p);
    values
        .iter()
        .map(|&v| {
            let u: f64 = rng.random();
            if u < p {
                0.0
            } else {
                v * keep_scale
            }
        })
        .collect()
}
