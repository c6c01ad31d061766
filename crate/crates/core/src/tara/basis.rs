use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterCollection, Rank1Direction};
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One weight per raw rank-1 LoRA factor.
    A,
    /// One weight per (task, shared singular direction).
    B,
    /// One weight per (task, layer) on the whole task update.
    AdaMerging,
}

/// The weighted components of one layer: `W = W₀ + Σ_k φ[weight_index[k]] σ_k u_k v_kᵀ`.
#[derive(Clone, Debug)]
pub struct LayerBasis {
    pub layer_id: String,
    pub base: Matrix,
    pub directions: Vec<Rank1Direction>,
    /// Slot in this layer's weight vector that scales each direction.
    pub weight_index: Vec<usize>,
    pub n_weights: usize,
}

#[derive(Clone, Debug)]
pub struct DirectionBasis {
    pub variant: Variant,
    /// Number of merged tasks.
    pub n_tasks: usize,
    pub layers: Vec<LayerBasis>,
    /// Retained singular directions per layer (Variant B only).
    pub rank: Option<usize>,
}

impl DirectionBasis {
    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.n_weights).sum()
    }

    /// Start of each layer's slice inside the flat weight vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.n_weights;
                o
            })
            .collect()
    }

    pub fn init_weights(&self, value: f64) -> Vec<f64> {
        vec![value; self.n_weights()]
    }

    /// Merged weights for every layer. Linear in `phi`.
    pub fn assemble(&self, phi: &[f64]) -> Result<Vec<Matrix>> {
        if phi.len() != self.n_weights() {
            return Err(Error::shape(format!(
                "expected {} direction weights, got {}",
                self.n_weights(),
                phi.len()
            )));
        }
        Ok(self
            .layers
            .iter()
            .zip(self.offsets())
            .map(|(layer, off)| {
                let mut w = layer.base.clone();
                for (dir, &slot) in layer.directions.iter().zip(&layer.weight_index) {
                    dir.accumulate(&mut w, phi[off + slot]);
                }
                w
            })
            .collect())
    }

    /// `∂/∂φ` of `Σ_l ⟨G_l, W_l(φ)⟩_F`, i.e. each layer gradient projected onto
    /// its directions and pooled by weight slot.
    pub fn project_gradients(&self, grads: &[Matrix]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_weights()];
        for ((layer, off), g) in self.layers.iter().zip(self.offsets()).zip(grads) {
            for (dir, &slot) in layer.directions.iter().zip(&layer.weight_index) {
                out[off + slot] += dir.project(g);
            }
        }
        out
    }
}

/// Raw rank-1 factors `scale · b_ij a_ijᵀ`, one weight each.
pub fn build_variant_a(coll: &AdapterCollection) -> DirectionBasis {
    let layers = coll
        .layer_ids
        .iter()
        .zip(&coll.layers)
        .map(|(lid, layer)| {
            let directions: Vec<Rank1Direction> = layer
                .adapters
                .iter()
                .enumerate()
                .flat_map(|(i, ad)| {
                    let s = ad.scale();
                    ad.rank1_directions(i).into_iter().map(move |mut d| {
                        d.sigma = s;
                        d
                    })
                })
                .collect();
            let k = directions.len();
            LayerBasis {
                layer_id: lid.clone(),
                base: layer.base.clone(),
                directions,
                weight_index: (0..k).collect(),
                n_weights: k,
            }
        })
        .collect();
    DirectionBasis {
        variant: Variant::A,
        n_tasks: coll.num_tasks(),
        layers,
        rank: None,
    }
}

/// Default shared rank: total adapter rank, capped by the spectrum size.
pub fn default_shared_rank(coll: &AdapterCollection) -> usize {
    coll.layers
        .iter()
        .map(|layer| {
            let total: usize = layer.adapters.iter().map(|a| a.rank()).sum();
            let (d, m) = layer.base.shape();
            total.min(d.min(m * layer.adapters.len()))
        })
        .min()
        .unwrap_or(0)
}

/// Shared singular directions of `[ΔW_1, …, ΔW_N]` (horizontal concatenation).
/// Direction `(i, k)` is `σ_k u_k v_kiᵀ`, where `v_ki` is task `i`'s block of
/// `v_k`. Ordered task-major.
pub fn build_variant_b(coll: &AdapterCollection, rank: usize) -> Result<DirectionBasis> {
    let n = coll.num_tasks();
    if n == 0 {
        return Err(Error::invalid("no adapters to merge"));
    }
    let mut layers = Vec::with_capacity(coll.num_layers());
    for (lid, layer) in coll.layer_ids.iter().zip(&coll.layers) {
        let (d, m) = layer.base.shape();
        let available = d.min(m * n);
        if rank == 0 || rank > available {
            return Err(Error::invalid(format!(
                "shared rank {rank} outside 1..={available} for layer {lid}"
            )));
        }
        let deltas = layer.deltas();
        let x = Matrix::hstack(&deltas.iter().collect::<Vec<_>>())?;
        let s = svd(&x)?;
        let mut directions = Vec::with_capacity(n * rank);
        for i in 0..n {
            for k in 0..rank {
                let v = s.v.col(k);
                directions.push(Rank1Direction {
                    owner_task: i,
                    owner_index: k,
                    left: s.u.col(k),
                    right: v[i * m..(i + 1) * m].to_vec(),
                    sigma: s.sigma[k],
                });
            }
        }
        let k = directions.len();
        layers.push(LayerBasis {
            layer_id: lid.clone(),
            base: layer.base.clone(),
            directions,
            weight_index: (0..k).collect(),
            n_weights: k,
        });
    }
    Ok(DirectionBasis {
        variant: Variant::B,
        n_tasks: n,
        layers,
        rank: Some(rank),
    })
}

/// Whole-update coefficients: every factor of task `i` in a layer shares one weight.
pub fn build_adamerging(coll: &AdapterCollection) -> DirectionBasis {
    let mut basis = build_variant_a(coll);
    for layer in &mut basis.layers {
        layer.weight_index = layer.directions.iter().map(|d| d.owner_task).collect();
        layer.n_weights = coll.num_tasks();
    }
    basis.variant = Variant::AdaMerging;
    basis
}
