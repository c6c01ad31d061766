//! Subspace coverage (effective rank of stacked directions), the task-loss
//! Jacobian restricted to a direction set, its anisotropy, and the
//! sensitivity-misalignment index ξ.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterCollection, LoraAdapter, Rank1Direction};
use crate::error::{Error, Result};
use crate::harness::model::{loss_and_grad, Loss};
use crate::harness::TaskSuite;
use crate::linalg::{dot, effective_rank, norm, svd, Matrix, ZERO_SPECTRUM_TOL};
use crate::mergers::{merge_ta, DEFAULT_TA_LAMBDA};
use crate::tara::{build_variant_a, build_variant_b, default_shared_rank, DirectionBasis, Preference};

/// Coverage of one layer. A stack whose every row is zero has no effective
/// rank; it is reported as `None` and named in `warnings`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCoverage {
    pub layer_id: String,
    pub per_task: Vec<Option<f64>>,
    pub per_task_sum: f64,
    pub agnostic_erank: Option<f64>,
    pub aware_erank: Option<f64>,
    pub warnings: Vec<String>,
}

/// Per-layer coverage plus layer means of the three summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_task_sum: f64,
    pub agnostic_erank: Option<f64>,
    pub aware_erank: Option<f64>,
    pub layers: Vec<LayerCoverage>,
}

/// Singular values of a stack of row vectors given their Gram matrix.
pub fn gram_singular_values(gram: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(gram)?.sigma.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}

fn gram_erank(gram: &Matrix) -> Result<Option<f64>> {
    if gram.data().iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    match effective_rank(&gram_singular_values(gram)?) {
        Ok(e) => Ok(Some(e)),
        Err(Error::ZeroSpectrum) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Effective rank of explicitly materialized rows `vec(M_k)`.
pub fn explicit_stack_erank(rows: &[Matrix]) -> Result<f64> {
    let width = rows.first().map_or(0, |m| m.data().len());
    let mut data = Vec::with_capacity(rows.len() * width);
    for m in rows {
        if m.data().len() != width {
            return Err(Error::shape("stack rows differ in size"));
        }
        data.extend_from_slice(m.data());
    }
    let x = Matrix::from_vec(rows.len(), width, data)?;
    effective_rank(&svd(&x)?.sigma)
}

/// Gram matrix of the scaled rank-1 factors of every adapter, task-major:
/// `⟨s b aᵀ, s' b' a'ᵀ⟩_F = s s' (b·b')(a·a')`.
fn aware_gram(adapters: &[LoraAdapter]) -> (Matrix, Vec<(usize, usize)>) {
    let mut dirs = Vec::new();
    for (i, ad) in adapters.iter().enumerate() {
        for j in 0..ad.rank() {
            dirs.push((i, ad.b.col(j), ad.a.col(j), ad.scale()));
        }
    }
    let k = dirs.len();
    let mut g = Matrix::zeros(k, k);
    for p in 0..k {
        for q in p..k {
            let (_, bp, ap, sp) = &dirs[p];
            let (_, bq, aq, sq) = &dirs[q];
            let v = sp * sq * dot(bp, bq) * dot(ap, aq);
            g.set(p, q, v);
            g.set(q, p, v);
        }
    }
    let owners = dirs.iter().enumerate().map(|(idx, d)| (d.0, idx)).collect();
    (g, owners)
}

/// The three coverage stacks of one layer's adapters:
/// per task `vec(b_ij a_ijᵀ)`, all tasks' rank-1 factors together (aware),
/// and one `vec(ΔW_i)` per task (agnostic).
pub fn coverage_stacks(layer_id: &str, adapters: &[LoraAdapter]) -> Result<LayerCoverage> {
    if adapters.is_empty() {
        return Err(Error::invalid("coverage needs at least one adapter"));
    }
    let n = adapters.len();
    let (g, owners) = aware_gram(adapters);
    let mut warnings = Vec::new();

    let mut per_task = Vec::with_capacity(n);
    for (i, ad) in adapters.iter().enumerate() {
        let idx: Vec<usize> = owners.iter().filter(|(o, _)| *o == i).map(|(_, k)| *k).collect();
        let sub = Matrix::from_fn(idx.len(), idx.len(), |a, b| g.get(idx[a], idx[b]));
        let e = gram_erank(&sub)?;
        if e.is_none() {
            warnings.push(format!("task {} stack is all zero", ad.task_id));
        }
        per_task.push(e);
    }
    let aware = gram_erank(&g)?;
    if aware.is_none() {
        warnings.push("aware stack is all zero".into());
    }
    let mut ag = Matrix::zeros(n, n);
    for &(ti, p) in &owners {
        for &(tj, q) in &owners {
            ag.set(ti, tj, ag.get(ti, tj) + g.get(p, q));
        }
    }
    let agnostic = gram_erank(&ag)?;
    if agnostic.is_none() {
        warnings.push("agnostic stack is all zero".into());
    }
    for w in &warnings {
        warn!("layer {layer_id}: {w}");
    }
    Ok(LayerCoverage {
        layer_id: layer_id.to_string(),
        per_task_sum: per_task.iter().flatten().sum(),
        per_task,
        agnostic_erank: agnostic,
        aware_erank: aware,
        warnings,
    })
}

fn mean_present(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn coverage_report(coll: &AdapterCollection) -> Result<CoverageReport> {
    let layers = coll
        .layer_ids
        .par_iter()
        .zip(&coll.layers)
        .map(|(lid, layer)| coverage_stacks(lid, &layer.adapters))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageReport {
        per_task_sum: layers.iter().map(|l| l.per_task_sum).sum::<f64>() / layers.len().max(1) as f64,
        agnostic_erank: mean_present(layers.iter().map(|l| l.agnostic_erank)),
        aware_erank: mean_present(layers.iter().map(|l| l.aware_erank)),
        layers,
    })
}

/// `J[i, k] = ⟨∇f_i, S_k⟩_F` for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jacobian {
    pub entries: Matrix,
    /// `(owner task, index)` of each column.
    pub direction_ids: Vec<(usize, usize)>,
}

pub fn jacobian(directions: &[Rank1Direction], grads: &[Matrix]) -> Result<Jacobian> {
    if directions.is_empty() || grads.is_empty() {
        return Err(Error::invalid("jacobian needs at least one direction and one gradient"));
    }
    let (d, m) = grads[0].shape();
    if grads.iter().any(|g| g.shape() != (d, m))
        || directions.iter().any(|s| s.left.len() != d || s.right.len() != m)
    {
        return Err(Error::shape(format!("jacobian: every gradient and direction must be {d}×{m}")));
    }
    let entries = Matrix::from_fn(grads.len(), directions.len(), |i, k| directions[k].project(&grads[i]));
    if !entries.is_finite() {
        return Err(Error::NonFinite("jacobian".into()));
    }
    Ok(Jacobian {
        entries,
        direction_ids: directions.iter().map(|s| (s.owner_task, s.owner_index)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anisotropy {
    /// Singular values of `J`, descending.
    pub sigma: Vec<f64>,
    /// `σ_max / σ_min⁺`
    pub kappa: f64,
    /// `σ_k² / Σ_j σ_j²`
    pub energy: Vec<f64>,
    /// Right singular vectors (K × rank) spanning the row space of `J`.
    pub row_space: Matrix,
}

impl Anisotropy {
    pub fn sigma_max(&self) -> f64 {
        self.sigma[0]
    }

    /// Smallest singular value above the zero tolerance.
    pub fn sigma_min_plus(&self) -> f64 {
        self.sigma[self.row_space.cols() - 1]
    }

    /// `‖V Vᵀ φ‖`, the norm of `φ`'s component in the row space.
    pub fn row_space_norm(&self, phi: &[f64]) -> f64 {
        norm(&self.row_space.t_mat_vec(phi))
    }
}

pub fn anisotropy(j: &Jacobian) -> Result<Anisotropy> {
    let s = svd(&j.entries)?;
    let smax = s.sigma.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let r = s.sigma.iter().filter(|&&v| v > ZERO_SPECTRUM_TOL * smax).count();
    let total: f64 = s.sigma.iter().map(|v| v * v).sum();
    let k = j.entries.cols();
    Ok(Anisotropy {
        kappa: smax / s.sigma[r - 1],
        energy: s.sigma.iter().map(|v| v * v / total).collect(),
        row_space: Matrix::from_fn(k, r, |a, b| s.v.get(a, b)),
        sigma: s.sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub h: Vec<f64>,
    pub preference: Preference,
}

/// `h = Jᵀ ρ`
pub fn sensitivity_profile(j: &Jacobian, rho: &Preference) -> Result<SensitivityProfile> {
    if rho.len() != j.entries.rows() {
        return Err(Error::shape(format!(
            "preference of length {} for {} tasks",
            rho.len(),
            j.entries.rows()
        )));
    }
    Ok(SensitivityProfile {
        h: j.entries.t_mat_vec(rho.as_slice()),
        preference: rho.clone(),
    })
}

/// `1 − |⟨h₁, h₂⟩| / (‖h₁‖ ‖h₂‖)`, clamped to `[0, 1]`.
pub fn misalignment_xi(h1: &[f64], h2: &[f64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::shape("sensitivity profiles differ in length"));
    }
    let (n1, n2) = (dot(h1, h1), dot(h2, h2));
    if n1.sqrt() < 1e-12 || n2.sqrt() < 1e-12 {
        return Err(Error::UndefinedMisalignment);
    }
    Ok((1.0 - dot(h1, h2).abs() / (n1 * n2).sqrt()).clamp(0.0, 1.0))
}

/// Labeled cross-entropy gradients `∇_W f_i` of every task at `weights`, one
/// `Vec` (per layer) per task, on each task's training split.
pub fn task_gradients(weights: &[Matrix], suite: &TaskSuite, tasks: &[usize]) -> Result<Vec<Vec<Matrix>>> {
    tasks
        .par_iter()
        .map(|&t| {
            let task = suite
                .tasks
                .get(t)
                .ok_or_else(|| Error::invalid(format!("task index {t} out of range")))?;
            let lg = loss_and_grad(weights, &task.head, &task.train, Loss::CrossEntropy);
            if lg.weights.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of task {t}")));
            }
            Ok(lg.weights)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    /// Raw rank-1 LoRA factors.
    Raw,
    /// Shared singular directions of the concatenated updates.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer_id: String,
    pub basis: BasisKind,
    pub sigma: Vec<f64>,
    pub kappa: f64,
    pub energy: Vec<f64>,
    /// `ξ(uniform, e_i)` for each focal task `i`.
    pub xi: Vec<f64>,
}

fn basis_of(coll: &AdapterCollection, kind: BasisKind) -> Result<DirectionBasis> {
    match kind {
        BasisKind::Raw => Ok(build_variant_a(coll)),
        BasisKind::Shared => build_variant_b(coll, default_shared_rank(coll)),
    }
}

/// Jacobian spectrum and `ξ(uniform, one-hot)` per layer at the task
/// arithmetic merge with `λ = 0.3`. `tasks` maps collection tasks to suite
/// tasks.
pub fn xi_protocol(
    coll: &AdapterCollection,
    suite: &TaskSuite,
    tasks: &[usize],
    kind: BasisKind,
) -> Result<Vec<LayerDiagnostics>> {
    if tasks.len() != coll.num_tasks() {
        return Err(Error::shape("task mapping does not match the collection"));
    }
    let weights = merge_ta(coll, DEFAULT_TA_LAMBDA)?;
    let grads = task_gradients(&weights, suite, tasks)?;
    let basis = basis_of(coll, kind)?;
    let n = coll.num_tasks();
    basis
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let g: Vec<Matrix> = grads.iter().map(|per_layer| per_layer[l].clone()).collect();
            let j = jacobian(&layer.directions, &g)?;
            let an = anisotropy(&j)?;
            let uniform = sensitivity_profile(&j, &Preference::uniform(n))?;
            let xi = (0..n)
                .map(|i| misalignment_xi(&uniform.h, &sensitivity_profile(&j, &Preference::one_hot(n, i))?.h))
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerDiagnostics {
                layer_id: layer.layer_id.clone(),
                basis: kind,
                sigma: an.sigma,
                kappa: an.kappa,
                energy: an.energy,
                xi,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(left: Vec<f64>, right: Vec<f64>, sigma: f64) -> Rank1Direction {
        Rank1Direction {
            owner_task: 0,
            owner_index: 0,
            left,
            right,
            sigma,
        }
    }

    #[test]
    fn xi_examples() {
        let h = [1.0, -2.0, 0.5];
        assert_eq!(misalignment_xi(&h, &h).unwrap(), 0.0);
        let neg: Vec<f64> = h.iter().map(|v| -v).collect();
        assert_eq!(misalignment_xi(&h, &neg).unwrap(), 0.0);
        assert_eq!(misalignment_xi(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert!(matches!(misalignment_xi(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::UndefinedMisalignment)));
    }

    #[test]
    fn jacobian_of_orthonormal_set_is_diagonal() {
        let dirs = vec![dir(vec![1.0, 0.0], vec![1.0, 0.0], 2.0), dir(vec![0.0, 1.0], vec![0.0, 1.0], 3.0)];
        let grads: Vec<Matrix> = dirs
            .iter()
            .map(|d| Matrix::outer(&d.left, &d.right))
            .collect();
        let j = jacobian(&dirs, &grads).unwrap();
        assert_eq!(j.entries.data(), &[2.0, 0.0, 0.0, 3.0]);
        let an = anisotropy(&j).unwrap();
        assert_eq!(an.kappa, 1.5);
    }

    #[test]
    fn kappa_examples() {
        let ident = Jacobian {
            entries: Matrix::identity(3),
            direction_ids: vec![(0, 0); 3],
        };
        assert!((anisotropy(&ident).unwrap().kappa - 1.0).abs() < 1e-15);
        let diag = Jacobian {
            entries: Matrix::from_vec(2, 2, vec![10.0, 0.0, 0.0, 1.0]).unwrap(),
            direction_ids: vec![(0, 0); 2],
        };
        assert!((anisotropy(&diag).unwrap().kappa - 10.0).abs() < 1e-12);
        let zero = Jacobian {
            entries: Matrix::zeros(2, 2),
            direction_ids: vec![(0, 0); 2],
        };
        assert!(anisotropy(&zero).is_err());
    }

    #[test]
    fn duplicate_adapters_collapse_in_the_aware_stack() {
        let b = Matrix::from_vec(3, 1, vec![1.0, 2.0, 0.0]).unwrap();
        let a = Matrix::from_vec(2, 1, vec![0.5, -1.0]).unwrap();
        let ads = vec![
            LoraAdapter::new("t0", "l", b.clone(), a.clone(), 1.0).unwrap(),
            LoraAdapter::new("t1", "l", b, a, 1.0).unwrap(),
        ];
        let c = coverage_stacks("l", &ads).unwrap();
        assert!((c.aware_erank.unwrap() - 1.0).abs() < 1e-9);
        assert!((c.per_task_sum - 2.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_equal_updates_have_agnostic_erank_two() {
        let e = |n: usize, i: usize| Matrix::from_fn(n, 1, |r, _| if r == i { 1.0 } else { 0.0 });
        let ads = vec![
            LoraAdapter::new("t0", "l", e(3, 0), e(2, 0), 1.0).unwrap(),
            LoraAdapter::new("t1", "l", e(3, 1), e(2, 1), 1.0).unwrap(),
        ];
        let c = coverage_stacks("l", &ads).unwrap();
        assert!((c.agnostic_erank.unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_stack_is_absent_with_warning() {
        let ads = vec![LoraAdapter::new("t0", "l", Matrix::zeros(3, 2), Matrix::zeros(2, 2), 1.0).unwrap()];
        let c = coverage_stacks("l", &ads).unwrap();
        assert_eq!(c.aware_erank, None);
        assert_eq!(c.agnostic_erank, None);
        assert_eq!(c.per_task, vec![None]);
        assert_eq!(c.warnings.len(), 3);
    }
}
