//! Adam with decoupled weight decay, bias-corrected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update of `params` against `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = AdamW::new(AdamWConfig::default(), 3);
        let mut p = vec![0.4, -1.0, 2.0];
        for _ in 0..50 {
            opt.step(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![0.4, -1.0, 2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig::default();
        let g = [0.25, -3.0, 1e-3];
        let mut p = vec![0.4; 3];
        AdamW::new(cfg.clone(), 3).step(&mut p, &g);
        for i in 0..3 {
            // m̂ = g and v̂ = g² after bias correction on step 1.
            let expected = 0.4 - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = vec![1.0];
        AdamW::new(cfg, 1).step(&mut p, &[0.0]);
        assert!((p[0] - (1.0 - 1e-4)).abs() < 1e-15);
    }
}
