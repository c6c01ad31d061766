//! Dense 64-bit linear algebra used by every diagnostic and merger.
//!
//! The SVD is a one-sided Jacobi iteration over the smaller dimension. It is
//! slower than a bidiagonalisation route but produces bit-identical output for
//! identical input, which the direction-selection basis relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values at or below `ZERO_SPECTRUM_TOL * sigma_max` are treated as zero.
pub const ZERO_SPECTRUM_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 60;
const OFFDIAG_TOL: f64 = 1e-14;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// `u vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product. Panics when inner dimensions disagree.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul: {}x{} by {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, r) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * r;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t: inner dimension");
        Matrix::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul: inner dimension");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mat_vec: length");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`
    pub fn t_mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "t_mat_vec: length");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        out
    }

    /// `uᵀ self v`
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        assert_eq!(self.rows, u.len(), "bilinear: left length");
        assert_eq!(self.cols, v.len(), "bilinear: right length");
        u.iter()
            .enumerate()
            .map(|(i, &ui)| if ui == 0.0 { 0.0 } else { ui * dot(self.row(i), v) })
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled: shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// `self += s · u vᵀ`
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], s: f64) {
        assert_eq!(self.rows, u.len(), "add_outer: left length");
        assert_eq!(self.cols, v.len(), "add_outer: right length");
        for (i, &ui) in u.iter().enumerate() {
            let c = s * ui;
            if c == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, vj) in row.iter_mut().zip(v) {
                *r += c * vj;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Stacks `blocks` vertically. All blocks must share a column count.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map(|b| b.cols).unwrap_or(0);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(Error::shape("vstack: column counts differ"));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Concatenates `blocks` horizontally. All blocks must share a row count.
    pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map(|b| b.rows).unwrap_or(0);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::shape("hstack: row counts differ"));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Frobenius inner product `Σ_ij a_ij b_ij`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "frobenius_inner: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(dot(&a.data, &b.data))
}

/// Thin SVD `X = U diag(sigma) Vᵀ` with `q = min(rows, cols)` triplets.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U_r diag(σ_r) V_rᵀ` using the leading `r` triplets.
    pub fn reconstruct(&self, r: usize) -> Matrix {
        let r = r.min(self.sigma.len());
        let mut out = Matrix::zeros(self.u.rows(), self.v.rows());
        for k in 0..r {
            out.add_outer(&self.u.col(k), &self.v.col(k), self.sigma[k]);
        }
        out
    }
}

/// Deterministic thin SVD via one-sided Jacobi.
///
/// Singular values are sorted descending. For each `k` the entry of largest
/// magnitude in `u_k` is made positive (lowest index wins ties) and `v_k` is
/// flipped to match.
pub fn svd(x: &Matrix) -> Result<SvdResult> {
    if !x.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (rows, cols) = x.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::shape("svd of an empty matrix"));
    }
    let mut out = if rows >= cols {
        jacobi_tall(x)
    } else {
        let t = jacobi_tall(&x.transpose());
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

fn jacobi_tall(x: &Matrix) -> SvdResult {
    let (rows, cols) = x.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| x.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let fro = x.frobenius_norm();
    let abs_tol = (OFFDIAG_TOL * fro).powi(2);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma.abs() <= abs_tol || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = a.split_at_mut(q);
                rotate(&mut left[p], &mut right[0], c, s);
                let (left, right) = v.split_at_mut(q);
                rotate(&mut left[p], &mut right[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma_raw: Vec<f64> = a.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| sigma_raw[j].total_cmp(&sigma_raw[i]));

    let rank_tol = rows.max(cols) as f64 * f64::EPSILON * fro;
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    let mut v_cols = Vec::with_capacity(cols);
    for &k in &order {
        let s = sigma_raw[k];
        if s > rank_tol {
            u_cols.push(Some(a[k].iter().map(|e| e / s).collect()));
            sigma.push(s);
        } else {
            u_cols.push(None);
            sigma.push(0.0);
        }
        v_cols.push(v[k].clone());
    }
    let u_cols = complete_basis(rows, u_cols);

    SvdResult {
        u: Matrix::from_columns(rows, &u_cols),
        sigma,
        v: Matrix::from_columns(cols, &v_cols),
    }
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let a = *xi;
        let b = *yi;
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// Fills missing columns with unit vectors orthogonal to every present one,
/// drawn from the standard basis by largest residual after projection.
fn complete_basis(rows: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut known: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    for c in cols {
        match c {
            Some(c) => out.push(c),
            None => {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for j in 0..rows {
                    let mut e = vec![0.0; rows];
                    e[j] = 1.0;
                    for _ in 0..2 {
                        for k in &known {
                            let p = dot(&e, k);
                            for (ei, ki) in e.iter_mut().zip(k) {
                                *ei -= p * ki;
                            }
                        }
                    }
                    let n = norm(&e);
                    if best.as_ref().is_none_or(|(b, _)| n > *b) {
                        best = Some((n, e));
                    }
                }
                let (n, mut e) = best.expect("rows > 0");
                e.iter_mut().for_each(|x| *x /= n);
                known.push(e.clone());
                out.push(e);
            }
        }
    }
    out
}

fn fix_signs(s: &mut SvdResult) {
    let q = s.sigma.len();
    for k in 0..q {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..s.u.rows() {
            let a = s.u.get(i, k).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if s.u.get(best, k) < 0.0 {
            for i in 0..s.u.rows() {
                let x = s.u.get(i, k);
                s.u.set(i, k, -x);
            }
            for i in 0..s.v.rows() {
                let x = s.v.get(i, k);
                s.v.set(i, k, -x);
            }
        }
    }
}

/// Entropy-based effective rank `exp(-Σ p_k ln p_k)` with `p_k = σ_k² / Σ σ_j²`.
///
/// Values at or below `ZERO_SPECTRUM_TOL · σ_max` are excluded.
pub fn effective_rank(sigma: &[f64]) -> Result<f64> {
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::invalid("singular values must be finite and nonnegative"));
    }
    let max = sigma.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let kept: Vec<f64> = sigma
        .iter()
        .filter(|&&s| s > ZERO_SPECTRUM_TOL * max)
        .map(|s| (s / max).powi(2))
        .collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|e| e / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp().clamp(1.0, kept.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.t_matmul(m);
        let mut e = g.clone();
        e.add_scaled(&Matrix::identity(g.rows()), -1.0);
        e.frobenius_norm()
    }

    fn check_svd(x: &Matrix) {
        let s = svd(x).unwrap();
        let q = x.rows().min(x.cols());
        assert_eq!(s.sigma.len(), q);
        assert_eq!(s.u.shape(), (x.rows(), q));
        assert_eq!(s.v.shape(), (x.cols(), q));
        assert!(orthonormality_error(&s.u) <= 1e-9 * q as f64);
        assert!(orthonormality_error(&s.v) <= 1e-9 * q as f64);
        for w in s.sigma.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(s.sigma.iter().all(|&v| v >= 0.0));
        let mut r = s.reconstruct(q);
        r.add_scaled(x, -1.0);
        assert!(r.frobenius_norm() <= 1e-10 * x.frobenius_norm().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn identity_spectrum() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0, 1.0]);
        for k in 0..3 {
            let u = s.u.col(k);
            let v = s.v.col(k);
            assert!((dot(&u, &v) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_one_spectrum() {
        let b = [2.0, 0.0, 0.0];
        let a = [0.0, 3.0, 0.0, 0.0];
        let s = svd(&Matrix::outer(&b, &a)).unwrap();
        assert!((s.sigma[0] - 6.0).abs() < 1e-14);
        assert!(s.sigma[1..].iter().all(|&v| v == 0.0));
        assert!(orthonormality_error(&s.u) < 1e-12);
    }

    #[test]
    fn random_reconstruction_all_shapes() {
        for (i, &(r, c)) in [(8, 5), (5, 8), (6, 6), (1, 7), (7, 1), (30, 4)].iter().enumerate() {
            check_svd(&random(r, c, i as u64));
        }
        let x = random(8, 5, 99);
        let s = svd(&x).unwrap();
        let mut r = s.reconstruct(5);
        r.add_scaled(&x, -1.0);
        assert!(r.frobenius_norm() / x.frobenius_norm() <= 1e-10);
    }

    #[test]
    fn rank_deficient_shapes() {
        let left = random(9, 2, 3);
        let right = random(2, 6, 4);
        check_svd(&left.matmul(&right));
        check_svd(&left.matmul(&right).transpose());
        check_svd(&Matrix::zeros(4, 3));
    }

    #[test]
    fn sign_convention_and_determinism() {
        let x = random(7, 4, 11);
        let a = svd(&x).unwrap();
        let b = svd(&x).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.sigma, b.sigma);
        for k in 0..4 {
            let col = a.u.col(k);
            let (idx, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
            assert!(col[idx] > 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = Matrix::zeros(2, 2);
        x.data_mut()[1] = f64::NAN;
        assert!(matches!(svd(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn erank_examples() {
        assert_eq!(effective_rank(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 4.0);
        assert_eq!(effective_rank(&[5.0]).unwrap(), 1.0);
        // p = (0.8, 0.2): -(0.8 ln 0.8 + 0.2 ln 0.2) = 0.500402..., exp = 1.649385...
        let h: f64 = -(0.8f64 * 0.8f64.ln() + 0.2f64 * 0.2f64.ln());
        assert!((effective_rank(&[2.0, 1.0]).unwrap() - h.exp()).abs() < 1e-12);
        assert!((effective_rank(&[2.0, 1.0]).unwrap() - 1.6493).abs() < 1e-4);
        assert!(matches!(effective_rank(&[0.0, 0.0]), Err(Error::ZeroSpectrum)));
        assert!(effective_rank(&[]).is_err());
        assert_eq!(effective_rank(&[3.0, 0.0, 1e-20]).unwrap(), 1.0);
    }

    #[test]
    fn frobenius_examples() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(frobenius_inner(&x, &x).unwrap(), 30.0);
        assert_eq!(frobenius_inner(&x, &Matrix::zeros(2, 2)).unwrap(), 0.0);
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0];
        let r = Matrix::outer(&u, &v);
        let expected = dot(&u, &u) * dot(&v, &v);
        assert!((frobenius_inner(&r, &r).unwrap() - expected).abs() < 1e-12);
        assert!(frobenius_inner(&x, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn stacking_helpers() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(Matrix::vstack(&[&a, &b]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Matrix::hstack(&[&a, &b]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Matrix::hstack(&[&a.transpose(), &b.transpose()]).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
