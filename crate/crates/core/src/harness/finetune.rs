//! Toy LoRA fine-tuning: trains `B`, `A` (and optionally the head) of every
//! layer by cross-entropy with AdamW, from the standard `B = 0` start.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{accuracy, loss_and_grad, Loss};
use super::suite::{SuiteConfig, TaskSuite};
use crate::adapters::{AdapterCollection, LayerAdapters, LoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{keyed, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub train_head: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            lora_alpha: 16.0,
            dropout: 0.1,
            steps: 300,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 0.01,
                ..Default::default()
            },
            train_head: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Checks the settings against a suite configuration, so bad ranks are
    /// caught before any data is generated.
    pub fn validate(&self, suite: &SuiteConfig) -> Result<()> {
        self.optimizer.validate()?;
        if !(0.0..1.0).contains(&self.dropout) || !(self.lora_alpha > 0.0) {
            return Err(Error::invalid("need dropout in [0, 1) and lora_alpha > 0"));
        }
        if self.rank == 0 || self.batch_size == 0 {
            return Err(Error::invalid("rank and batch_size must be positive"));
        }
        for l in 0..suite.n_layers {
            let (d, m) = suite.layer_shape(l);
            if self.rank > d.min(m) {
                return Err(Error::invalid(format!(
                    "rank {} exceeds min(d, m) = {} for layer {l}",
                    self.rank,
                    d.min(m)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    /// One adapter per layer.
    pub adapters: Vec<LoraAdapter>,
    pub head: Matrix,
    /// Eval accuracy of the fine-tuned model, in percent.
    pub accuracy: f64,
}

fn apply(base: &[Matrix], bs: &[Matrix], as_: &[Matrix], scale: f64) -> Vec<Matrix> {
    base.iter()
        .zip(bs.iter().zip(as_))
        .map(|(w0, (b, a))| {
            let mut w = w0.clone();
            w.add_scaled(&b.matmul_t(a), scale);
            w
        })
        .collect()
}

pub fn finetune_lora(suite: &TaskSuite, task: usize, cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    cfg.validate(&suite.config)?;
    let t = suite
        .tasks
        .get(task)
        .ok_or_else(|| Error::invalid(format!("task index {task} out of range")))?;
    let r = cfg.rank;
    let scale = cfg.lora_alpha / r as f64;
    let n_layers = suite.base.len();

    let mut init = keyed(cfg.seed, &[tag::FINETUNE, task as u64, u64::MAX]);
    let mut bs: Vec<Matrix> = suite.base.iter().map(|w| Matrix::zeros(w.rows(), r)).collect();
    let mut as_: Vec<Matrix> = suite
        .base
        .iter()
        .map(|w| {
            let bound = 1.0 / (w.cols() as f64).sqrt();
            Matrix::from_fn(w.cols(), r, |_, _| init.random_range(-bound..bound))
        })
        .collect();
    let mut head = t.head.clone();

    let sizes: Vec<usize> = bs.iter().zip(&as_).flat_map(|(b, a)| [b.data().len(), a.data().len()]).collect();
    let n_params = sizes.iter().sum::<usize>() + if cfg.train_head { head.data().len() } else { 0 };
    let mut opt = AdamW::new(cfg.optimizer.clone(), n_params);
    let mut params = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut first_loss = None;

    for step in 0..cfg.steps {
        let mut rng = keyed(cfg.seed, &[tag::FINETUNE, task as u64, step as u64]);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..t.train.len())).collect();
        let batch = t.train.select(&idx);
        let weights = apply(&suite.base, &bs, &as_, scale);
        let lg = loss_and_grad(&weights, &head, &batch, Loss::CrossEntropy);
        if !lg.value.is_finite() {
            return Err(Error::Divergence(format!("task {task} step {step}: non-finite loss")));
        }
        let first = *first_loss.get_or_insert(lg.value);
        if lg.value > 10.0 * first.max(1e-12) {
            return Err(Error::Divergence(format!(
                "task {task} step {step}: loss {} exceeds 10x initial {first}",
                lg.value
            )));
        }

        let mut off = 0;
        for l in 0..n_layers {
            let g = &lg.weights[l];
            let db = g.matmul(&as_[l]).scaled(scale);
            let da = g.t_matmul(&bs[l]).scaled(scale);
            for (src, dst) in [(&bs[l], &db), (&as_[l], &da)] {
                let n = src.data().len();
                params[off..off + n].copy_from_slice(src.data());
                grad[off..off + n].copy_from_slice(dst.data());
                off += n;
            }
        }
        if cfg.train_head {
            params[off..].copy_from_slice(head.data());
            grad[off..].copy_from_slice(lg.head.data());
        }
        opt.step(&mut params, &grad);
        let mut off = 0;
        for l in 0..n_layers {
            for m in [&mut bs[l], &mut as_[l]] {
                let n = m.data().len();
                m.data_mut().copy_from_slice(&params[off..off + n]);
                off += n;
            }
        }
        if cfg.train_head {
            head.data_mut().copy_from_slice(&params[off..]);
        }
    }

    for m in bs.iter_mut().chain(as_.iter_mut()) {
        m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    let weights = apply(&suite.base, &bs, &as_, scale);
    let acc = 100.0 * accuracy(&weights, &head, &t.eval);
    let adapters = suite
        .layer_ids
        .iter()
        .zip(bs.into_iter().zip(as_))
        .map(|(lid, (b, a))| {
            let mut ad = LoraAdapter::new(t.name.clone(), lid.clone(), b, a, cfg.lora_alpha)?;
            ad.dropout = cfg.dropout;
            Ok(ad)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FinetuneResult {
        adapters,
        head,
        accuracy: acc,
    })
}

/// A suite with one fine-tuned adapter per task and the reference accuracies
/// used for normalisation.
#[derive(Clone, Debug)]
pub struct TrainedSuite {
    pub suite: TaskSuite,
    pub collection: AdapterCollection,
    /// Fine-tuned eval accuracy per task, percent.
    pub references: Vec<f64>,
    /// Eval accuracy of the frozen base per task, percent.
    pub base_accuracy: Vec<f64>,
}

/// Fine-tunes every task independently. Heads are replaced by the trained
/// heads when `cfg.train_head` is set.
pub fn train_suite(mut suite: TaskSuite, cfg: &FinetuneConfig) -> Result<TrainedSuite> {
    cfg.validate(&suite.config)?;
    let results: Vec<FinetuneResult> = (0..suite.num_tasks())
        .into_par_iter()
        .map(|t| finetune_lora(&suite, t, cfg))
        .collect::<Result<_>>()?;
    let mut layers: Vec<LayerAdapters> = suite
        .base
        .iter()
        .map(|b| LayerAdapters {
            base: b.clone(),
            adapters: Vec::new(),
        })
        .collect();
    let mut references = Vec::new();
    for (task, res) in suite.tasks.iter_mut().zip(results) {
        for (layer, ad) in layers.iter_mut().zip(res.adapters) {
            layer.adapters.push(ad);
        }
        task.head = res.head;
        references.push(res.accuracy);
    }
    let base_accuracy = suite
        .tasks
        .iter()
        .map(|t| 100.0 * accuracy(&suite.base, &t.head, &t.eval))
        .collect();
    let collection = AdapterCollection::new(
        suite.layer_ids.clone(),
        suite.tasks.iter().map(|t| t.name.clone()).collect(),
        layers,
    )?;
    Ok(TrainedSuite {
        suite,
        collection,
        references,
        base_accuracy,
    })
}
