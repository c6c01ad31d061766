//! On-disk form of a trained suite: the LMK1 container (base plus adapters)
//! and a JSON sidecar with the generator config, heads, and references. Task
//! data is regenerated from the config, so the pair is self-contained.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::finetune::{FinetuneConfig, TrainedSuite};
use super::suite::{generate_suite, SuiteConfig};
use crate::adapters::{load_collection, save_collection};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub suite: SuiteConfig,
    pub finetune: FinetuneConfig,
    pub task_names: Vec<String>,
    pub heads: Vec<Matrix>,
    pub label_ids: Vec<Vec<usize>>,
    pub references: Vec<f64>,
    pub base_accuracy: Vec<f64>,
}

/// Writes `container` and `sidecar` for `trained`.
pub fn save_trained(trained: &TrainedSuite, finetune: &FinetuneConfig, container: &Path, sidecar: &Path) -> Result<()> {
    save_collection(&trained.collection, container)?;
    let sc = Sidecar {
        suite: trained.suite.config.clone(),
        finetune: finetune.clone(),
        task_names: trained.suite.tasks.iter().map(|t| t.name.clone()).collect(),
        heads: trained.suite.tasks.iter().map(|t| t.head.clone()).collect(),
        label_ids: trained.suite.tasks.iter().map(|t| t.label_ids.clone()).collect(),
        references: trained.references.clone(),
        base_accuracy: trained.base_accuracy.clone(),
    };
    fs::write(sidecar, serde_json::to_string_pretty(&sc)?)?;
    Ok(())
}

/// Loads the pair written by [`save_trained`], regenerating the task data and
/// checking that the container's base weights match the regenerated base.
pub fn load_trained(container: &Path, sidecar: &Path) -> Result<(TrainedSuite, FinetuneConfig)> {
    let collection = load_collection(container)?;
    let sc: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar)?)?;
    let mut suite = generate_suite(&sc.suite)?;
    let n = suite.num_tasks();
    if sc.heads.len() != n || sc.references.len() != n || sc.task_names != collection.task_ids {
        return Err(Error::invalid("sidecar does not match the container's tasks"));
    }
    if collection.base_weights() != suite.base {
        return Err(Error::invalid("container base weights differ from the regenerated suite"));
    }
    for (task, head) in suite.tasks.iter_mut().zip(sc.heads) {
        if head.shape() != task.head.shape() {
            return Err(Error::shape(format!("head of {} has shape {:?}", task.name, head.shape())));
        }
        task.head = head;
    }
    Ok((
        TrainedSuite {
            suite,
            collection,
            references: sc.references,
            base_accuracy: sc.base_accuracy,
        },
        sc.finetune,
    ))
}
