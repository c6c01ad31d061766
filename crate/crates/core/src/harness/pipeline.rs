//! Method dispatch over baselines and TARA, preference sweeps, and the
//! seen/unseen generalization split.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport, SplitSummary};
use super::suite::TaskSuite;
use crate::adapters::AdapterCollection;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mergers::{merge, MergeConfig, Method};
use crate::rng::{keyed, tag};
use crate::tara::{adamerging_baseline, run_tara, OptimConfig, Preference, TraceRow, Variant, DEFAULT_ALPHA};

/// Any merging method the harness can run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MergeMethod {
    Baseline(MergeConfig),
    AdaMerging,
    Tara { variant: Variant, alpha: f64 },
}

impl MergeMethod {
    pub fn name(&self) -> String {
        match self {
            MergeMethod::Baseline(c) => c.method.name().to_string(),
            MergeMethod::AdaMerging => "adamerging".into(),
            MergeMethod::Tara { variant: Variant::B, .. } => "tara-b".into(),
            MergeMethod::Tara { .. } => "tara-a".into(),
        }
    }

    /// Whether the preference vector changes the result.
    pub fn uses_preference(&self) -> bool {
        matches!(self, MergeMethod::Tara { .. })
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    /// Accepts the baseline names plus `adamerging`, `tara-a`, `tara-b`.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        match key.as_str() {
            "adamerging" => Ok(MergeMethod::AdaMerging),
            "tara-a" => Ok(MergeMethod::Tara {
                variant: Variant::A,
                alpha: DEFAULT_ALPHA,
            }),
            "tara-b" | "tara" => Ok(MergeMethod::Tara {
                variant: Variant::B,
                alpha: DEFAULT_ALPHA,
            }),
            _ => Method::parse(&key)
                .map(|m| MergeMethod::Baseline(MergeConfig::new(m)))
                .ok_or_else(|| Error::invalid(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MethodOutput {
    pub weights: Vec<Matrix>,
    /// Optimization trace for the learned methods.
    pub trace: Option<Vec<TraceRow>>,
    pub phi: Option<Vec<f64>>,
    /// Baseline configuration with defaults filled in.
    pub resolved: Option<MergeConfig>,
}

/// Merges `coll`, whose tasks are suite tasks `tasks` in order.
pub fn run_method(
    coll: &AdapterCollection,
    suite: &TaskSuite,
    tasks: &[usize],
    method: &MergeMethod,
    rho: &Preference,
    optim: &OptimConfig,
) -> Result<MethodOutput> {
    if coll.num_tasks() == 0 {
        return Err(Error::invalid("no adapters to merge"));
    }
    if tasks.len() != coll.num_tasks() {
        return Err(Error::shape(format!(
            "{} suite tasks for {} adapters",
            tasks.len(),
            coll.num_tasks()
        )));
    }
    Ok(match method {
        MergeMethod::Baseline(cfg) => {
            let out = merge(coll, cfg)?;
            MethodOutput {
                weights: out.weights,
                trace: None,
                phi: None,
                resolved: Some(out.config),
            }
        }
        MergeMethod::AdaMerging => {
            let r = adamerging_baseline(coll, suite, tasks, optim)?;
            MethodOutput {
                weights: r.weights,
                trace: Some(r.trace),
                phi: Some(r.phi),
                resolved: None,
            }
        }
        MergeMethod::Tara { variant, alpha } => {
            if !(*alpha > 0.0) {
                return Err(Error::invalid("alpha must be positive"));
            }
            let r = run_tara(coll, suite, tasks, *variant, rho, *alpha, optim)?;
            MethodOutput {
                weights: r.weights,
                trace: Some(r.trace),
                phi: Some(r.phi),
                resolved: None,
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rho: Preference,
    pub report: EvalReport,
}

/// One merge and evaluation per preference, run in parallel; output order
/// follows `preferences`.
pub fn sweep_preferences(
    coll: &AdapterCollection,
    suite: &TaskSuite,
    references: &[f64],
    tasks: &[usize],
    preferences: &[Preference],
    method: &MergeMethod,
    optim: &OptimConfig,
) -> Result<Vec<SweepPoint>> {
    if preferences.is_empty() {
        return Err(Error::invalid("empty preference list"));
    }
    preferences
        .par_iter()
        .map(|rho| {
            let out = run_method(coll, suite, tasks, method, rho, optim)?;
            Ok(SweepPoint {
                rho: rho.clone(),
                report: evaluate(&out.weights, suite, references, tasks)?,
            })
        })
        .collect()
}

/// `n` evenly spaced two-task preferences from `(1, 0)` to `(0, 1)`.
pub fn two_task_grid(n: usize) -> Result<Vec<Preference>> {
    if n < 2 {
        return Err(Error::invalid("a two-task sweep needs at least two points"));
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            Preference::new(vec![1.0 - t, t])
        })
        .collect()
}

/// Parses `"0:0.125,1:0.125"` into `(task, weight)` pairs.
pub fn parse_fixed(spec: &str) -> Result<Vec<(usize, f64)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (t, w) = pair
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("expected task:weight, got {pair:?}")))?;
            let t = t.trim().parse().map_err(|_| Error::invalid(format!("bad task index {t:?}")))?;
            let w = w.trim().parse().map_err(|_| Error::invalid(format!("bad weight {w:?}")))?;
            Ok((t, w))
        })
        .collect()
}

/// `k` preferences with the `fixed` weights pinned and the remaining mass
/// split uniformly at random (flat Dirichlet) over the other tasks. Draw `j`
/// uses the stream keyed by `(seed, j)`.
pub fn random_completions(n_tasks: usize, fixed: &[(usize, f64)], k: usize, seed: u64) -> Result<Vec<Preference>> {
    if k == 0 {
        return Err(Error::invalid("need at least one random preference"));
    }
    let mut pinned = vec![None; n_tasks];
    for &(t, w) in fixed {
        if t >= n_tasks || pinned[t].is_some() || !(0.0..=1.0).contains(&w) {
            return Err(Error::invalid(format!("bad fixed weight {t}:{w}")));
        }
        pinned[t] = Some(w);
    }
    let free: Vec<usize> = (0..n_tasks).filter(|&t| pinned[t].is_none()).collect();
    let rest = 1.0 - fixed.iter().map(|(_, w)| w).sum::<f64>();
    if rest < -1e-12 || (free.is_empty() && rest.abs() > 1e-9) {
        return Err(Error::invalid(format!("fixed weights leave mass {rest}")));
    }
    (0..k)
        .map(|j| {
            let mut rng = keyed(seed, &[tag::SWEEP, j as u64]);
            let e: Vec<f64> = free.iter().map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = e.iter().sum();
            let mut rho: Vec<f64> = pinned.iter().map(|p| p.unwrap_or(0.0)).collect();
            for (&t, ei) in free.iter().zip(&e) {
                rho[t] = rest.max(0.0) * ei / total;
            }
            Preference::new(rho)
        })
        .collect()
}

/// Sample covariance (denominator `n − 1`) of two tasks' accuracies across
/// sweep points.
pub fn accuracy_covariance(points: &[SweepPoint], a: usize, b: usize) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("covariance needs at least two points"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.report.accuracy[a]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.report.accuracy[b]).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    Ok(xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0))
}

/// Merges only the `seen` adapters and evaluates every task of the suite.
/// `coll` must hold one adapter per suite task, in suite order.
pub fn unseen_split_eval(
    coll: &AdapterCollection,
    suite: &TaskSuite,
    references: &[f64],
    seen: &[usize],
    method: &MergeMethod,
    optim: &OptimConfig,
) -> Result<(EvalReport, MethodOutput)> {
    if seen.is_empty() {
        return Err(Error::invalid("seen task set is empty"));
    }
    if coll.num_tasks() != suite.num_tasks() {
        return Err(Error::shape("collection and suite disagree on the task count"));
    }
    let sub = coll.subset(seen)?;
    let rho = Preference::uniform(seen.len());
    let out = run_method(&sub, suite, seen, method, &rho, optim)?;
    let report = split_report(&out.weights, suite, references, seen)?;
    Ok((report, out))
}

/// Evaluates `weights` on every suite task and summarizes the `seen` /
/// unseen split.
pub fn split_report(weights: &[Matrix], suite: &TaskSuite, references: &[f64], seen: &[usize]) -> Result<EvalReport> {
    let all: Vec<usize> = (0..suite.num_tasks()).collect();
    let mut report = evaluate(weights, suite, references, &all)?;
    let unseen: Vec<usize> = all.iter().copied().filter(|t| !seen.contains(t)).collect();
    let avg = |idx: &[usize]| idx.iter().map(|&t| report.normalized[t]).sum::<f64>() / idx.len() as f64;
    report.split = Some(SplitSummary {
        seen: seen.iter().map(|&t| suite.tasks[t].name.clone()).collect(),
        unseen: unseen.iter().map(|&t| suite.tasks[t].name.clone()).collect(),
        seen_avg: avg(seen),
        unseen_avg: (!unseen.is_empty()).then(|| avg(&unseen)),
        combined_avg: report.avg_normalized,
    });
    Ok(report)
}
