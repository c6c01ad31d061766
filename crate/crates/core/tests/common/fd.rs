use loramerge::adapters::{AdapterCollection, LayerAdapters, LoraAdapter};
use loramerge::harness::{generate_suite, SuiteConfig, TaskSuite};
use loramerge::tara::{
    build_basis, objective_and_gradient, DirectionBasis, Preference, Scalarization, StchConfig, TaskBatches, Variant,
};
use rand::Rng;

use super::{gaussian, rng};

pub fn small_suite(seed: u64, n_tasks: usize, n_layers: usize, classes: usize) -> TaskSuite {
    generate_suite(&SuiteConfig {
        n_tasks,
        in_dim: 6,
        hidden_dim: 5,
        n_layers,
        classes,
        train_samples: 8,
        eval_samples: 8,
        adapt_samples: 12,
        subspace_dim: 3,
        shared_dims: 1,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Random adapters on top of the suite's base weights.
pub fn adapters_for(suite: &TaskSuite, seed: u64, rank: usize, scale: f64) -> AdapterCollection {
    let mut r = rng(seed);
    let tasks: Vec<String> = suite.tasks.iter().map(|t| t.name.clone()).collect();
    let layers = suite
        .base
        .iter()
        .zip(&suite.layer_ids)
        .map(|(base, lid)| LayerAdapters {
            base: base.clone(),
            adapters: tasks
                .iter()
                .map(|t| {
                    let b = gaussian(&mut r, base.rows(), rank).scaled(scale);
                    let a = gaussian(&mut r, base.cols(), rank);
                    LoraAdapter::new(t, lid, b, a, rank as f64).unwrap()
                })
                .collect(),
        })
        .collect();
    AdapterCollection::new(suite.layer_ids.clone(), tasks, layers).unwrap()
}

pub fn central_difference(
    basis: &DirectionBasis,
    phi: &[f64],
    batches: &TaskBatches,
    rho: &Preference,
    scal: &Scalarization,
    h: f64,
) -> Vec<f64> {
    (0..phi.len())
        .map(|k| {
            let mut p = phi.to_vec();
            p[k] += h;
            let up = objective_and_gradient(basis, &p, batches, rho, scal).unwrap().value;
            p[k] -= 2.0 * h;
            let down = objective_and_gradient(basis, &p, batches, rho, scal).unwrap().value;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate error relative to the coordinate's magnitude, floored
/// at 1e-3 of the largest coordinate so near-zero entries are not divided by
/// rounding noise.
pub fn max_rel_error(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(1e-3 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

/// Worst relative coordinate error of the analytic gradient against central
/// differences on random configuration `case`.
pub fn random_configuration(variant: Variant, case: u64) -> f64 {
    let mut r = rng(1000 + case);
    let n_tasks = r.random_range(1..=3);
    let n_layers = r.random_range(1..=2);
    let classes = r.random_range(2..=4);
    let suite = small_suite(case, n_tasks, n_layers, classes);
    let coll = adapters_for(&suite, case + 7, r.random_range(1..=3), 0.5);
    let basis = build_basis(&coll, variant, None).unwrap();
    let tasks: Vec<usize> = (0..n_tasks).collect();
    let batches = TaskBatches::sample(&suite, &tasks, 6, case, 0).unwrap();
    let phi: Vec<f64> = (0..basis.n_weights()).map(|_| r.random_range(-0.5..1.0)).collect();
    let raw: Vec<f64> = (0..n_tasks).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let rho = Preference::new(raw.iter().map(|v| v / total).collect()).unwrap();
    let scal = if case % 5 == 4 {
        Scalarization::WeightedSum
    } else {
        // Anchors kept well away from f so |f − z| is smooth around phi.
        let f = objective_and_gradient(&basis, &phi, &batches, &rho, &Scalarization::WeightedSum)
            .unwrap()
            .task_losses;
        let anchors = f
            .iter()
            .map(|fi| fi + if r.random::<bool>() { 0.3 } else { -0.3 })
            .collect();
        Scalarization::Stch(StchConfig {
            alpha: r.random_range(0.1..2.0),
            anchors,
        })
    };
    let got = objective_and_gradient(&basis, &phi, &batches, &rho, &scal).unwrap().grad;
    let fd = central_difference(&basis, &phi, &batches, &rho, &scal, 1e-5);
    max_rel_error(&got, &fd)
}

