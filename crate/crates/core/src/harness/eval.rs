//! Per-task normalised accuracy and the joint-label Hits@k protocol.

use serde::{Deserialize, Serialize};

use super::model::{accuracy, forward};
use super::suite::TaskSuite;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitsAtK {
    pub k: usize,
    pub hits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub seen_avg: f64,
    pub unseen_avg: Option<f64>,
    pub combined_avg: f64,
}

/// Accuracies in percent; `normalized[i] = 100 · accuracy[i] / reference[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<String>,
    pub accuracy: Vec<f64>,
    pub normalized: Vec<f64>,
    pub avg_accuracy: f64,
    pub avg_normalized: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hits: Option<Vec<HitsAtK>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSummary>,
}

pub fn normalized_accuracy(accuracy: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(Error::invalid(format!("missing or zero reference accuracy ({reference})")));
    }
    Ok(100.0 * accuracy / reference)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores `weights` on each task in `subset` with that task's own head.
pub fn evaluate(weights: &[Matrix], suite: &TaskSuite, references: &[f64], subset: &[usize]) -> Result<EvalReport> {
    let mut tasks = Vec::new();
    let mut acc = Vec::new();
    let mut norm = Vec::new();
    for &t in subset {
        let task = suite
            .tasks
            .get(t)
            .ok_or_else(|| Error::invalid(format!("task index {t} out of range")))?;
        let reference = *references
            .get(t)
            .ok_or_else(|| Error::invalid(format!("no reference accuracy for {}", task.name)))?;
        let a = 100.0 * accuracy(weights, &task.head, &task.eval);
        norm.push(normalized_accuracy(a, reference)?);
        acc.push(a);
        tasks.push(task.name.clone());
    }
    Ok(EvalReport {
        tasks,
        avg_accuracy: mean(&acc),
        avg_normalized: mean(&norm),
        accuracy: acc,
        normalized: norm,
        hits: None,
        split: None,
    })
}

/// Scores every eval sample of every task over the union label space. Heads
/// are concatenated and columns sharing a joint label merge by max.
pub fn joint_scores(weights: &[Matrix], suite: &TaskSuite) -> (Vec<Vec<f64>>, Vec<usize>) {
    let union = suite.union_size();
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for task in &suite.tasks {
        let fwd = forward(weights, &task.head, &task.eval.x);
        let feats = fwd.acts.last().expect("nonempty");
        let per_head: Vec<Matrix> = suite.tasks.iter().map(|h| feats.matmul_t(&h.head)).collect();
        for i in 0..task.eval.len() {
            let mut s = vec![f64::NEG_INFINITY; union];
            for (h, logits) in suite.tasks.iter().zip(&per_head) {
                for (c, &lab) in h.label_ids.iter().enumerate() {
                    s[lab] = s[lab].max(logits.get(i, c));
                }
            }
            scores.push(s);
            truth.push(task.label_ids[task.eval.y[i]]);
        }
    }
    (scores, truth)
}

/// Fraction of samples whose true label ranks in the top `k`. Ranking is by
/// score descending, lower label id first among equal scores.
pub fn hits_at_k(scores: &[Vec<f64>], truth: &[usize], ks: &[usize]) -> Result<Vec<HitsAtK>> {
    let union = scores.first().map_or(0, Vec::len);
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > union) {
        return Err(Error::invalid(format!("k = {k} outside 1..={union}")));
    }
    let ranks: Vec<usize> = scores
        .iter()
        .zip(truth)
        .map(|(s, &y)| {
            s.iter()
                .enumerate()
                .filter(|&(j, &v)| v > s[y] || (v == s[y] && j < y))
                .count()
        })
        .collect();
    let n = ranks.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| HitsAtK {
            k,
            hits: 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n,
        })
        .collect())
}

pub fn evaluate_joint(weights: &[Matrix], suite: &TaskSuite, ks: &[usize]) -> Result<Vec<HitsAtK>> {
    let (scores, truth) = joint_scores(weights, suite);
    hits_at_k(&scores, &truth, ks)
}
