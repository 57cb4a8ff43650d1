//! Class-incremental learning benchmark engine with out-of-distribution detection.
//!
//! A run trains a small MLP over a stream of tasks with one continual-learning strategy,
//! optionally adds a training-time OOD objective, calibrates a set of post-hoc detectors
//! after every task and records both forgetting metrics and detection metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ood_train;
pub mod rng;
pub mod runner;
pub mod strategies;

pub use error::{Error, Result};
