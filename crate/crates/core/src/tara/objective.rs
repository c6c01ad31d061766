//! Preferences, the entropy pseudo-loss, and smooth Tchebycheff scalarization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const SIMPLEX_TOL: f64 = 1e-9;
const DISTRIBUTION_TOL: f64 = 1e-6;
/// Residuals `|f_i - z_i|` below this contribute a zero subgradient.
pub const RESIDUAL_EPS: f64 = 1e-8;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Preference {
    rho: Vec<f64>,
}

impl Preference {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::OffSimplex("empty preference".into()));
        }
        if let Some(v) = rho.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::OffSimplex(format!("entry {v} is negative or non-finite")));
        }
        let sum: f64 = rho.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::OffSimplex(format!("entries sum to {sum}")));
        }
        Ok(Self { rho })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            rho: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut rho = vec![0.0; n];
        rho[i] = 1.0;
        Self { rho }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rho
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

impl TryFrom<Vec<f64>> for Preference {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Preference::new(v)
    }
}

impl From<Preference> for Vec<f64> {
    fn from(p: Preference) -> Vec<f64> {
        p.rho
    }
}

/// Mean Shannon entropy (natural log) of the rows of `probs`.
pub fn entropy_loss(probs: &Matrix) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::InvalidDistribution("empty batch".into()));
    }
    let mut total = 0.0;
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::InvalidDistribution(format!("row {i} sums to {sum}")));
        }
        total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok(total / probs.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StchConfig {
    pub alpha: f64,
    pub anchors: Vec<f64>,
}

/// `α log Σ_i exp(ρ_i |f_i - z_i| / α)`, stabilized by subtracting the max.
pub fn stch_objective(f: &[f64], z: &[f64], rho: &[f64], alpha: f64) -> f64 {
    let t: Vec<f64> = f
        .iter()
        .zip(z)
        .zip(rho)
        .map(|((fi, zi), ri)| ri * (fi - zi).abs() / alpha)
        .collect();
    let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    alpha * (max + t.iter().map(|ti| (ti - max).exp()).sum::<f64>().ln())
}

/// `∂Ψ/∂f_i = softmax(t)_i · ρ_i · sign(f_i - z_i)`, zero where the residual
/// is below `RESIDUAL_EPS`.
pub fn stch_gradient(f: &[f64], z: &[f64], rho: &[f64], alpha: f64) -> Vec<f64> {
    let t: Vec<f64> = f
        .iter()
        .zip(z)
        .zip(rho)
        .map(|((fi, zi), ri)| ri * (fi - zi).abs() / alpha)
        .collect();
    let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = t.iter().map(|ti| (ti - max).exp()).collect();
    let s: f64 = e.iter().sum();
    f.iter()
        .zip(z)
        .zip(rho)
        .zip(&e)
        .map(|(((fi, zi), ri), ei)| {
            let r = fi - zi;
            if r.abs() < RESIDUAL_EPS {
                0.0
            } else {
                ei / s * ri * r.signum()
            }
        })
        .collect()
}

/// How per-task entropies combine into the scalar objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scalarization {
    Stch(StchConfig),
    /// `Σ_i ρ_i f_i`
    WeightedSum,
}

impl Scalarization {
    pub fn value(&self, f: &[f64], rho: &[f64]) -> f64 {
        match self {
            Scalarization::Stch(c) => stch_objective(f, &c.anchors, rho, c.alpha),
            Scalarization::WeightedSum => f.iter().zip(rho).map(|(a, b)| a * b).sum(),
        }
    }

    pub fn gradient(&self, f: &[f64], rho: &[f64]) -> Vec<f64> {
        match self {
            Scalarization::Stch(c) => stch_gradient(f, &c.anchors, rho, c.alpha),
            Scalarization::WeightedSum => rho.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_checks() {
        assert!(Preference::new(vec![0.5, 0.5]).is_ok());
        assert!(Preference::new(vec![0.5, 0.6]).is_err());
        assert!(Preference::new(vec![1.5, -0.5]).is_err());
        assert!(Preference::new(vec![]).is_err());
        let p: std::result::Result<Preference, _> = serde_json::from_str("[0.2, 0.2]");
        assert!(p.is_err());
    }

    #[test]
    fn entropy_examples() {
        let uniform = Matrix::from_vec(1, 4, vec![0.25; 4]).unwrap();
        assert!((entropy_loss(&uniform).unwrap() - 4f64.ln()).abs() < 1e-15);
        let one_hot = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(entropy_loss(&one_hot).unwrap(), 0.0);
        let half = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        assert!((entropy_loss(&half).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let bad = Matrix::from_vec(1, 2, vec![0.5, 0.6]).unwrap();
        assert!(entropy_loss(&bad).is_err());
    }

    #[test]
    fn stch_gradient_matches_differences() {
        let f = [0.9, 0.4, 1.3];
        let z = [0.2, 0.6, 1.0];
        let rho = [0.2, 0.5, 0.3];
        let g = stch_gradient(&f, &z, &rho, 0.7);
        for i in 0..3 {
            let (mut p, mut m) = (f, f);
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (stch_objective(&p, &z, &rho, 0.7) - stch_objective(&m, &z, &rho, 0.7)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert_eq!(stch_gradient(&[1.0], &[1.0], &[1.0], 1.0), vec![0.0]);
    }
}
