//! Per-layer LoRA adapters, the task-ordered collection that holds them, and
//! their decomposition into rank-1 directions.

mod container;

pub use container::{export_debug_json, load_collection, read_collection, save_collection, write_collection, MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{ContainerError, Error, Result};
use crate::linalg::Matrix;

/// Reserved task key for the frozen base weights inside a container.
pub const BASE_KEY: &str = "__base__";

pub const DEFAULT_LORA_ALPHA: f64 = 16.0;

/// One task's low-rank update for one layer: `ΔW = (lora_alpha / rank) · B Aᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub task_id: String,
    pub layer_id: String,
    /// `d × r`
    pub b: Matrix,
    /// `m × r`
    pub a: Matrix,
    pub lora_alpha: f64,
    /// Training metadata only; never applied.
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(
        task_id: impl Into<String>,
        layer_id: impl Into<String>,
        b: Matrix,
        a: Matrix,
        lora_alpha: f64,
    ) -> Result<Self> {
        let ad = Self {
            task_id: task_id.into(),
            layer_id: layer_id.into(),
            b,
            a,
            lora_alpha,
            dropout: 0.0,
        };
        ad.validate()?;
        Ok(ad)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.b.cols();
        if r == 0 {
            return Err(Error::shape(format!("{}/{}: rank 0 adapter", self.task_id, self.layer_id)));
        }
        if self.a.cols() != r {
            return Err(Error::shape(format!(
                "{}/{}: B has {} columns, A has {}",
                self.task_id,
                self.layer_id,
                r,
                self.a.cols()
            )));
        }
        if r > self.b.rows().min(self.a.rows()) {
            return Err(Error::shape(format!(
                "{}/{}: rank {} exceeds min(d, m) = {}",
                self.task_id,
                self.layer_id,
                r,
                self.b.rows().min(self.a.rows())
            )));
        }
        if !self.lora_alpha.is_finite() || !self.b.is_finite() || !self.a.is_finite() {
            return Err(Error::NonFinite(format!("adapter {}/{}", self.task_id, self.layer_id)));
        }
        Ok(())
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// Output dimension `d`.
    #[inline]
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `m`.
    #[inline]
    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank() as f64
    }

    /// `scale · B Aᵀ`
    pub fn delta_weight(&self) -> Matrix {
        self.b.matmul_t(&self.a).scaled(self.scale())
    }

    /// The unscaled outer products `b_j a_jᵀ`; their sum times `scale()` is
    /// `delta_weight()`.
    pub fn rank1_directions(&self, owner_task: usize) -> Vec<Rank1Direction> {
        (0..self.rank())
            .map(|j| Rank1Direction {
                owner_task,
                owner_index: j,
                left: self.b.col(j),
                right: self.a.col(j),
                sigma: 1.0,
            })
            .collect()
    }
}

/// `sigma · left · rightᵀ`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rank1Direction {
    pub owner_task: usize,
    /// Column `j` of the owning adapter, or singular index `k` for a shared basis.
    pub owner_index: usize,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub sigma: f64,
}

impl Rank1Direction {
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.left.len(), self.right.len());
        m.add_outer(&self.left, &self.right, self.sigma);
        m
    }

    /// `⟨G, σ u vᵀ⟩_F = σ uᵀ G v`
    pub fn project(&self, g: &Matrix) -> f64 {
        self.sigma * g.bilinear(&self.left, &self.right)
    }

    /// `w += weight · σ u vᵀ`
    pub fn accumulate(&self, w: &mut Matrix, weight: f64) {
        w.add_outer(&self.left, &self.right, weight * self.sigma);
    }
}

/// One layer: the frozen base and one adapter per task.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapters {
    pub base: Matrix,
    pub adapters: Vec<LoraAdapter>,
}

impl LayerAdapters {
    pub fn deltas(&self) -> Vec<Matrix> {
        self.adapters.iter().map(LoraAdapter::delta_weight).collect()
    }
}

/// Adapters for `N` tasks across an ordered list of layers. Task order is the
/// same in every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCollection {
    pub layer_ids: Vec<String>,
    pub task_ids: Vec<String>,
    pub layers: Vec<LayerAdapters>,
}

impl AdapterCollection {
    pub fn new(layer_ids: Vec<String>, task_ids: Vec<String>, layers: Vec<LayerAdapters>) -> Result<Self> {
        let c = Self {
            layer_ids,
            task_ids,
            layers,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_ids.len() != self.layers.len() {
            return Err(Error::shape("layer id count does not match layer count"));
        }
        for (lid, layer) in self.layer_ids.iter().zip(&self.layers) {
            if layer.adapters.len() != self.task_ids.len() {
                return Err(ContainerError::InconsistentTasks(format!(
                    "layer {lid} has {} adapters for {} tasks",
                    layer.adapters.len(),
                    self.task_ids.len()
                ))
                .into());
            }
            for (tid, ad) in self.task_ids.iter().zip(&layer.adapters) {
                if &ad.task_id != tid || &ad.layer_id != lid {
                    return Err(ContainerError::InconsistentTasks(format!(
                        "expected {tid}/{lid}, found {}/{}",
                        ad.task_id, ad.layer_id
                    ))
                    .into());
                }
                ad.validate()?;
                if ad.b.rows() != layer.base.rows() || ad.a.rows() != layer.base.cols() {
                    return Err(Error::shape(format!(
                        "{tid}/{lid}: adapter maps {}->{} but base is {:?}",
                        ad.in_dim(),
                        ad.out_dim(),
                        layer.base.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_index(&self, layer_id: &str) -> Result<usize> {
        self.layer_ids
            .iter()
            .position(|l| l == layer_id)
            .ok_or_else(|| Error::invalid(format!("unknown layer {layer_id}")))
    }

    pub fn base_weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.base.clone()).collect()
    }

    /// Keeps only the listed tasks, in the given order.
    pub fn subset(&self, tasks: &[usize]) -> Result<AdapterCollection> {
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.num_tasks()) {
            return Err(Error::invalid(format!("task index {t} out of range")));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| LayerAdapters {
                base: l.base.clone(),
                adapters: tasks.iter().map(|&t| l.adapters[t].clone()).collect(),
            })
            .collect();
        AdapterCollection::new(
            self.layer_ids.clone(),
            tasks.iter().map(|&t| self.task_ids[t].clone()).collect(),
            layers,
        )
    }

    /// Rounds every stored value through 32-bit storage precision.
    pub fn quantize_to_f32(&mut self) {
        fn q(m: &mut Matrix) {
            m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for layer in &mut self.layers {
            q(&mut layer.base);
            for ad in &mut layer.adapters {
                q(&mut ad.b);
                q(&mut ad.a);
            }
        }
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

    #[test]
    fn delta_of_rank_one() {
        let b = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let a = Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let ad = LoraAdapter::new("t", "l", b, a, 1.0).unwrap();
        assert_eq!(ad.delta_weight().data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ad = LoraAdapter::new("t", "l", Matrix::zeros(4, 2), random(3, 2, &mut rng), 16.0).unwrap();
        assert!(ad.delta_weight().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ad = LoraAdapter::new("t", "l", random(6, 3, &mut rng), random(5, 3, &mut rng), 16.0).unwrap();
        let s = 16.0 / 3.0;
        let dw = ad.delta_weight();
        for i in 0..6 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += ad.b.get(i, k) * ad.a.get(j, k);
                }
                let expected = s * acc;
                assert!((dw.get(i, j) - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn directions_reconstruct_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ad = LoraAdapter::new("t", "l", random(6, 4, &mut rng), random(5, 4, &mut rng), 16.0).unwrap();
        let dirs = ad.rank1_directions(0);
        assert_eq!(dirs.len(), 4);
        let mut sum = Matrix::zeros(6, 5);
        for d in &dirs {
            d.accumulate(&mut sum, ad.scale());
        }
        let mut diff = sum.clone();
        diff.add_scaled(&ad.delta_weight(), -1.0);
        assert!(diff.frobenius_norm() <= 1e-12 * ad.delta_weight().frobenius_norm());

        let one = LoraAdapter::new("t", "l", random(3, 1, &mut rng), random(3, 1, &mut rng), 1.0).unwrap();
        assert_eq!(one.rank1_directions(0)[0].to_matrix(), one.delta_weight());
    }

    #[test]
    fn zero_column_gives_zero_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = random(4, 2, &mut rng);
        b.set(0, 1, 0.0);
        b.set(1, 1, 0.0);
        b.set(2, 1, 0.0);
        b.set(3, 1, 0.0);
        let ad = LoraAdapter::new("t", "l", b, random(3, 2, &mut rng), 2.0).unwrap();
        assert!(ad.rank1_directions(0)[1].to_matrix().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validation_errors() {
        assert!(LoraAdapter::new("t", "l", Matrix::zeros(2, 3), Matrix::zeros(2, 3), 1.0).is_err());
        assert!(LoraAdapter::new("t", "l", Matrix::zeros(4, 2), Matrix::zeros(3, 1), 1.0).is_err());
    }

    #[test]
    fn collection_rejects_task_order_drift() {
        let mk = |t: &str, l: &str| LoraAdapter::new(t, l, Matrix::zeros(2, 1), Matrix::zeros(2, 1), 1.0).unwrap();
        let layers = vec![
            LayerAdapters {
                base: Matrix::zeros(2, 2),
                adapters: vec![mk("a", "l0"), mk("b", "l0")],
            },
            LayerAdapters {
                base: Matrix::zeros(2, 2),
                adapters: vec![mk("b", "l1"), mk("a", "l1")],
            },
        ];
        let err = AdapterCollection::new(vec!["l0".into(), "l1".into()], vec!["a".into(), "b".into()], layers);
        assert!(matches!(err, Err(Error::Container(ContainerError::InconsistentTasks(_)))));
    }
}
