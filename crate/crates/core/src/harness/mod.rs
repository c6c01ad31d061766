//! Synthetic multi-task suites, toy fine-tuning, and evaluation protocols.

pub mod eval;
pub mod finetune;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod suite;

pub use eval::{evaluate, evaluate_joint, hits_at_k, joint_scores, normalized_accuracy, EvalReport, HitsAtK, SplitSummary};
pub use finetune::{finetune_lora, train_suite, FinetuneConfig, FinetuneResult, TrainedSuite};
pub use model::{Dataset, Loss};
pub use pipeline::{
    accuracy_covariance, parse_fixed, random_completions, run_method, sweep_preferences, two_task_grid,
    split_report, unseen_split_eval, MergeMethod, MethodOutput, SweepPoint,
};
pub use store::{load_trained, save_trained, Sidecar};
pub use suite::{generate_suite, SuiteConfig, Task, TaskSuite};
