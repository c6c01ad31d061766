//! LoRA adapter merging with subspace-coverage and anisotropy diagnostics.
//!
//! Modules, bottom-up:
//! - [`linalg`]: dense matrices, Jacobi SVD, effective rank
//! - [`adapters`]: LoRA factors, rank-1 directions, the LMK1 container
//! - [`diagnostics`]: coverage stacks, restricted Jacobians, anisotropy, misalignment
//! - [`mergers`]: TA, TIES, DARE-TIES, Linear, SVD, KnOTS, LoRA-LEGO
//! - [`tara`]: direction-selection merging under a smooth Tchebycheff objective
//! - [`harness`]: synthetic multi-task suites, toy fine-tuning, evaluation protocols
//! - [`cli`]: the `loramerge` command line

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod cli;
pub mod diagnostics;
mod error;
pub mod harness;
pub mod linalg;
pub mod mergers;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tara;

pub use error::{ContainerError, Error, Result};
pub use linalg::Matrix;
