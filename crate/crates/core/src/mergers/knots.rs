//! KnOTS: align task updates in the shared right-singular basis of their row
//! concatenation, then merge the per-task coefficient blocks elementwise.

use serde::{Deserialize, Serialize};

use super::ties::{dare_drop, ties_vectors};
use crate::adapters::AdapterCollection;
use crate::error::Result;
use crate::linalg::{svd, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KnotsInner {
    Ties { trim_fraction: f64 },
    DareTies { trim_fraction: f64, drop_prob: f64, seed: u64 },
}

/// For every layer: `[ΔW_1; …; ΔW_N] = U Σ Vᵀ`, task block `U_i Σ` (d × q)
/// enters the inner merger, and the merged block `M` gives `W₀ + λ M Vᵀ`.
pub fn merge_knots(coll: &AdapterCollection, lambda: f64, inner: KnotsInner) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(coll.num_layers());
    for (l, layer) in coll.layers.iter().enumerate() {
        let deltas = layer.deltas();
        let d = layer.base.rows();
        let x = Matrix::vstack(&deltas.iter().collect::<Vec<_>>())?;
        let s = svd(&x)?;
        let q = s.sigma.len();
        let blocks: Vec<Vec<f64>> = (0..deltas.len())
            .map(|i| {
                let mut block = s.u.row_block(i * d, (i + 1) * d);
                for r in 0..d {
                    for (k, &sk) in s.sigma.iter().enumerate() {
                        block.set(r, k, block.get(r, k) * sk);
                    }
                }
                block.into_data()
            })
            .collect();
        let merged = match inner {
            KnotsInner::Ties { trim_fraction } => ties_vectors(&blocks, trim_fraction),
            KnotsInner::DareTies {
                trim_fraction,
                drop_prob,
                seed,
            } => {
                let dropped: Vec<Vec<f64>> = blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| dare_drop(b, drop_prob, seed, i, l))
                    .collect();
                ties_vectors(&dropped, trim_fraction)
            }
        };
        let m = Matrix::from_vec(d, q, merged)?;
        let mut w = layer.base.clone();
        w.add_scaled(&m.matmul_t(&s.v), lambda);
        out.push(w);
    }
    Ok(out)
}
