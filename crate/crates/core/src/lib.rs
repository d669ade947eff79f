//! Sequential Matryoshka embedding compression.
//!
//! Compresses precomputed embeddings through a chain of small adapter stages.
//! Each stage picks a subset of its input dimensions with learnable,
//! Gumbel-perturbed selection logits and refines the result with a residual
//! dense layer. Stages are trained one at a time and frozen once their
//! validation loss stops improving, so a stack can be extended to smaller
//! dimensions later without touching what is already trained.
//!
//! Module map:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`numerics`] | cosine, temperature softmax, Gumbel sampling, dense matrices |
//! | [`dataset`] | embedding/qrels I/O, planted synthetic data, query batching |
//! | [`adapter`] | selection, stages, stacks, checkpoints |
//! | [`losses`] | rank, pairwise MSE/CE, unsupervised and joint objectives |
//! | [`grad`] | reverse-mode gradients, closed-form and finite-difference oracles, gradient statistics |
//! | [`memory`] | FIFO cross-batch memory with exact top-k retrieval |
//! | [`trainer`] | sequential and joint (MRL) training loops, Adam |
//! | [`evaluation`] | nDCG@k, WARE, achievement rate, PCA, experiment harnesses |
//! | [`cli`] | command-line front end |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod grad;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod trainer;

pub use error::{Result, SmecError};
