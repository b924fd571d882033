//! Desk-scale contrastive representation learning.
//!
//! The crate implements the full pipeline for learning visual
//! representations by agreement between augmented views: stochastic
//! paired-view augmentation, a small reverse-mode tensor engine, a
//! residual encoder with a projection head, the NT-Xent / NT-Logistic /
//! margin-triplet loss family with analytic gradients, LARS training
//! with cross-shard batch-norm aggregation, and the evaluation probes
//! (linear evaluation, fine-tuning, transformation prediction,
//! augmentation ablation grids).

pub mod augment;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
