//! The toy network: a stack of adapted linear layers followed by a task head,
//! `logits = H · W_L ⋯ W_1 x`, with reverse-mode gradients for both losses.

use crate::linalg::Matrix;

/// Labeled samples, one per row of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let m = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Dataset {
            x: Matrix::from_vec(idx.len(), m, data).expect("row copy"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Mean predictive entropy; labels are ignored.
    Entropy,
    /// Mean negative log-likelihood of the true label.
    CrossEntropy,
}

pub struct Forward {
    /// `acts[0] = x`, `acts[l + 1] = acts[l] W_lᵀ`
    pub acts: Vec<Matrix>,
    pub logits: Matrix,
}

pub fn forward(weights: &[Matrix], head: &Matrix, x: &Matrix) -> Forward {
    let mut acts = Vec::with_capacity(weights.len() + 1);
    acts.push(x.clone());
    for w in weights {
        let next = acts.last().expect("nonempty").matmul_t(w);
        acts.push(next);
    }
    let logits = acts.last().expect("nonempty").matmul_t(head);
    Forward { acts, logits }
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let c = logits.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|z| *z -= lse);
    }
    out
}

/// Per-row Shannon entropy (natural log) of `softmax(logits)`.
pub fn row_entropies(logits: &Matrix) -> Vec<f64> {
    let lp = log_softmax(logits);
    (0..lp.rows())
        .map(|i| -lp.row(i).iter().map(|&l| l.exp() * l).sum::<f64>())
        .collect()
}

pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(weights: &[Matrix], head: &Matrix, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let f = forward(weights, head, &data.x);
    let hits = predictions(&f.logits).iter().zip(&data.y).filter(|(p, y)| p == y).count();
    hits as f64 / data.len() as f64
}

pub struct LossGrad {
    pub value: f64,
    /// `∂loss/∂W_l`, one per layer.
    pub weights: Vec<Matrix>,
    /// `∂loss/∂H`
    pub head: Matrix,
}

/// Loss and its gradient with respect to every layer weight and the head.
pub fn loss_and_grad(weights: &[Matrix], head: &Matrix, data: &Dataset, loss: Loss) -> LossGrad {
    let n = data.len().max(1) as f64;
    let fwd = forward(weights, head, &data.x);
    let lp = log_softmax(&fwd.logits);
    let c = lp.cols();
    let mut dlogits = Matrix::zeros(lp.rows(), c);
    let mut value = 0.0;
    for i in 0..lp.rows() {
        let row = lp.row(i);
        match loss {
            Loss::Entropy => {
                let h: f64 = -row.iter().map(|&l| l.exp() * l).sum::<f64>();
                value += h;
                // ∂H/∂z_c = -p_c (ln p_c + H)
                for (j, &l) in row.iter().enumerate() {
                    dlogits.set(i, j, -l.exp() * (l + h) / n);
                }
            }
            Loss::CrossEntropy => {
                let y = data.y[i];
                value -= row[y];
                for (j, &l) in row.iter().enumerate() {
                    let t = if j == y { 1.0 } else { 0.0 };
                    dlogits.set(i, j, (l.exp() - t) / n);
                }
            }
        }
    }
    value /= n;

    let top = fwd.acts.last().expect("nonempty");
    let head_grad = dlogits.t_matmul(top);
    let mut delta = dlogits.matmul(head);
    let mut grads = vec![Matrix::zeros(0, 0); weights.len()];
    for l in (0..weights.len()).rev() {
        grads[l] = delta.t_matmul(&fwd.acts[l]);
        if l > 0 {
            delta = delta.matmul(&weights[l]);
        }
    }
    LossGrad {
        value,
        weights: grads,
        head: head_grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn fd_check(loss: Loss) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = vec![random(4, 3, &mut rng), random(5, 4, &mut rng)];
        let head = random(3, 5, &mut rng);
        let data = Dataset {
            x: random(6, 3, &mut rng),
            y: (0..6).map(|i| i % 3).collect(),
        };
        let g = loss_and_grad(&weights, &head, &data, loss);
        let h = 1e-6;
        for l in 0..2 {
            for idx in 0..weights[l].data().len() {
                let mut plus = weights.clone();
                plus[l].data_mut()[idx] += h;
                let mut minus = weights.clone();
                minus[l].data_mut()[idx] -= h;
                let fd = (loss_and_grad(&plus, &head, &data, loss).value
                    - loss_and_grad(&minus, &head, &data, loss).value)
                    / (2.0 * h);
                assert!((fd - g.weights[l].data()[idx]).abs() < 1e-7, "layer {l} idx {idx}");
            }
        }
        for idx in 0..head.data().len() {
            let mut plus = head.clone();
            plus.data_mut()[idx] += h;
            let mut minus = head.clone();
            minus.data_mut()[idx] -= h;
            let fd = (loss_and_grad(&weights, &plus, &data, loss).value
                - loss_and_grad(&weights, &minus, &data, loss).value)
                / (2.0 * h);
            assert!((fd - g.head.data()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn entropy_gradient_matches_differences() {
        fd_check(Loss::Entropy);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        fd_check(Loss::CrossEntropy);
    }

    #[test]
    fn uniform_logits_have_log_c_entropy() {
        let h = row_entropies(&Matrix::zeros(2, 4));
        assert!((h[0] - 4f64.ln()).abs() < 1e-15);
    }
}
