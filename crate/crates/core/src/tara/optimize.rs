//! Gradient of the scalarized entropy objective with respect to the direction
//! weights, and the AdamW loop that minimizes it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::basis::{build_adamerging, DirectionBasis};
use super::objective::{Preference, Scalarization};
use crate::adapters::AdapterCollection;
use crate::error::{Error, Result};
use crate::harness::model::{loss_and_grad, Dataset, Loss};
use crate::harness::TaskSuite;
use crate::linalg::Matrix;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{keyed, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_iters: usize,
    pub phi_init: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            max_iters: 500,
            phi_init: 0.4,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !self.phi_init.is_finite() {
            return Err(Error::invalid("phi_init must be finite"));
        }
        Ok(())
    }
}

/// Which suite tasks the merged adapters belong to, in collection order, and
/// the inputs each is scored on.
#[derive(Clone, Debug)]
pub struct TaskBatches<'a> {
    pub suite: &'a TaskSuite,
    pub tasks: Vec<usize>,
    pub inputs: Vec<Matrix>,
}

impl<'a> TaskBatches<'a> {
    /// Each task's whole adaptation pool.
    pub fn full(suite: &'a TaskSuite, tasks: &[usize]) -> Result<Self> {
        let inputs = tasks
            .iter()
            .map(|&t| {
                suite
                    .tasks
                    .get(t)
                    .map(|task| task.adapt.x.clone())
                    .ok_or_else(|| Error::invalid(format!("task index {t} out of range")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            suite,
            tasks: tasks.to_vec(),
            inputs,
        })
    }

    /// `batch_size` rows per task drawn with replacement from the adaptation
    /// pool, stream keyed by `(seed, step, task)`.
    pub fn sample(suite: &'a TaskSuite, tasks: &[usize], batch_size: usize, seed: u64, step: usize) -> Result<Self> {
        let inputs = tasks
            .iter()
            .map(|&t| {
                let pool = &suite
                    .tasks
                    .get(t)
                    .ok_or_else(|| Error::invalid(format!("task index {t} out of range")))?
                    .adapt;
                if pool.is_empty() {
                    return Err(Error::invalid(format!("task {t} has an empty adaptation pool")));
                }
                let mut rng = keyed(seed, &[tag::BATCH, step as u64, t as u64]);
                let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..pool.len())).collect();
                Ok(pool.select(&idx).x)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            suite,
            tasks: tasks.to_vec(),
            inputs,
        })
    }
}

fn unlabeled(x: &Matrix) -> Dataset {
    Dataset {
        x: x.clone(),
        y: vec![0; x.rows()],
    }
}

/// Mean predictive entropy of each task under `weights` with its own head,
/// and the per-layer weight gradients.
pub fn task_entropies(weights: &[Matrix], batches: &TaskBatches) -> Result<Vec<(f64, Vec<Matrix>)>> {
    batches
        .tasks
        .par_iter()
        .zip(&batches.inputs)
        .map(|(&t, x)| {
            let lg = loss_and_grad(weights, &batches.suite.tasks[t].head, &unlabeled(x), Loss::Entropy);
            if !lg.value.is_finite() {
                return Err(Error::NonFinite(format!("entropy of task {t}")));
            }
            Ok((lg.value, lg.weights))
        })
        .collect()
}

/// `z_i`: entropy on task `i`'s adaptation pool with only adapter `i` applied.
pub fn compute_anchors(coll: &AdapterCollection, batches: &TaskBatches) -> Result<Vec<f64>> {
    if batches.inputs.iter().any(|x| x.rows() == 0) {
        return Err(Error::invalid("empty adaptation batch"));
    }
    (0..coll.num_tasks())
        .map(|i| {
            let weights: Vec<Matrix> = coll
                .layers
                .iter()
                .map(|layer| {
                    let mut w = layer.base.clone();
                    w.add_scaled(&layer.adapters[i].delta_weight(), 1.0);
                    w
                })
                .collect();
            let t = batches.tasks[i];
            let lg = loss_and_grad(&weights, &batches.suite.tasks[t].head, &unlabeled(&batches.inputs[i]), Loss::Entropy);
            Ok(lg.value)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub value: f64,
    pub task_losses: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Value and exact gradient of the scalarized objective at `phi`.
pub fn objective_and_gradient(
    basis: &DirectionBasis,
    phi: &[f64],
    batches: &TaskBatches,
    rho: &Preference,
    scalarization: &Scalarization,
) -> Result<ObjectiveEval> {
    if rho.len() != batches.tasks.len() {
        return Err(Error::shape(format!(
            "preference has {} entries for {} tasks",
            rho.len(),
            batches.tasks.len()
        )));
    }
    let weights = basis.assemble(phi)?;
    let per_task = task_entropies(&weights, batches)?;
    let f: Vec<f64> = per_task.iter().map(|(v, _)| *v).collect();
    let value = scalarization.value(&f, rho.as_slice());
    let df = scalarization.gradient(&f, rho.as_slice());
    let mut pooled: Vec<Matrix> = weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    for ((_, grads), &c) in per_task.iter().zip(&df) {
        if c != 0.0 {
            for (acc, g) in pooled.iter_mut().zip(grads) {
                acc.add_scaled(g, c);
            }
        }
    }
    let grad = basis.project_gradients(&pooled);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("objective or gradient".into()));
    }
    Ok(ObjectiveEval {
        value,
        task_losses: f,
        grad,
    })
}

pub fn gradient_phi(
    basis: &DirectionBasis,
    phi: &[f64],
    batches: &TaskBatches,
    rho: &Preference,
    scalarization: &Scalarization,
) -> Result<Vec<f64>> {
    Ok(objective_and_gradient(basis, phi, batches, rho, scalarization)?.grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub psi: f64,
    pub task_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub phi: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub weights: Vec<Matrix>,
}

/// AdamW on `phi` for `cfg.max_iters` steps, each on a fresh batch per task.
/// Aborts if the objective exceeds ten times its first value.
pub fn optimize(
    basis: &DirectionBasis,
    suite: &TaskSuite,
    tasks: &[usize],
    rho: &Preference,
    scalarization: &Scalarization,
    cfg: &OptimConfig,
) -> Result<OptimResult> {
    optimize_from(basis, basis.init_weights(cfg.phi_init), suite, tasks, rho, scalarization, cfg)
}

pub fn optimize_from(
    basis: &DirectionBasis,
    mut phi: Vec<f64>,
    suite: &TaskSuite,
    tasks: &[usize],
    rho: &Preference,
    scalarization: &Scalarization,
    cfg: &OptimConfig,
) -> Result<OptimResult> {
    cfg.validate()?;
    if tasks.len() != basis.n_tasks {
        return Err(Error::shape(format!(
            "{} suite tasks for a basis over {} tasks",
            tasks.len(),
            basis.n_tasks
        )));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone(), phi.len());
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut first = None;
    for step in 0..cfg.max_iters {
        let batches = TaskBatches::sample(suite, tasks, cfg.batch_size, cfg.seed, step)?;
        let ev = objective_and_gradient(basis, &phi, &batches, rho, scalarization)?;
        let initial: f64 = *first.get_or_insert(ev.value);
        if ev.value > 10.0 * initial.abs().max(1e-12) {
            return Err(Error::Divergence(format!(
                "step {step}: objective {} exceeds 10x initial {initial}",
                ev.value
            )));
        }
        trace.push(TraceRow {
            step,
            psi: ev.value,
            task_losses: ev.task_losses,
        });
        opt.step(&mut phi, &ev.grad);
    }
    let weights = basis.assemble(&phi)?;
    Ok(OptimResult { phi, trace, weights })
}

pub const ADAMERGING_INIT: f64 = 0.3;

/// Per-(task, layer) coefficients on whole task updates, minimizing the
/// uniform mean of per-task entropies.
pub fn adamerging_baseline(
    coll: &AdapterCollection,
    suite: &TaskSuite,
    tasks: &[usize],
    cfg: &OptimConfig,
) -> Result<OptimResult> {
    let basis = build_adamerging(coll);
    let rho = Preference::uniform(coll.num_tasks());
    optimize_from(
        &basis,
        basis.init_weights(ADAMERGING_INIT),
        suite,
        tasks,
        &rho,
        &Scalarization::WeightedSum,
        cfg,
    )
}
