//! Preference-aligned merging: learn signed weights on rank-1 directions by
//! minimizing a smooth Tchebycheff scalarization of per-task entropies.

mod basis;
mod objective;
mod optimize;

pub use basis::{
    build_adamerging, build_variant_a, build_variant_b, default_shared_rank, DirectionBasis, LayerBasis, Variant,
};
pub use objective::{
    entropy_loss, stch_gradient, stch_objective, Preference, Scalarization, StchConfig, RESIDUAL_EPS, SIMPLEX_TOL,
};
pub use optimize::{
    adamerging_baseline, compute_anchors, gradient_phi, objective_and_gradient, optimize, optimize_from,
    task_entropies, ObjectiveEval, OptimConfig, OptimResult, TaskBatches, TraceRow, ADAMERGING_INIT,
};

use crate::adapters::AdapterCollection;
use crate::error::Result;
use crate::harness::TaskSuite;

pub const DEFAULT_ALPHA: f64 = 1.0;

/// Builds the requested basis; Variant B uses `rank` or the default shared rank.
pub fn build_basis(coll: &AdapterCollection, variant: Variant, rank: Option<usize>) -> Result<DirectionBasis> {
    match variant {
        Variant::A => Ok(build_variant_a(coll)),
        Variant::B => build_variant_b(coll, rank.unwrap_or_else(|| default_shared_rank(coll))),
        Variant::AdaMerging => Ok(build_adamerging(coll)),
    }
}

/// Anchors on the full adaptation pools, then STCH optimization of `phi`.
pub fn run_tara(
    coll: &AdapterCollection,
    suite: &TaskSuite,
    tasks: &[usize],
    variant: Variant,
    rho: &Preference,
    alpha: f64,
    cfg: &OptimConfig,
) -> Result<OptimResult> {
    let basis = build_basis(coll, variant, None)?;
    let anchors = compute_anchors(coll, &TaskBatches::full(suite, tasks)?)?;
    let scal = Scalarization::Stch(StchConfig { alpha, anchors });
    optimize(&basis, suite, tasks, rho, &scal, cfg)
}
