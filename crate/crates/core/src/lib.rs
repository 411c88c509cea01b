//! Training toolkit for text classifiers with gradient-salience rationale
//! constraints.
//!
//! The crate bundles a reverse-mode autodiff engine with second-order
//! support ([`graph`]), a CNN sentence classifier ([`model`]), word-salience
//! computation ([`salience`]), the auxiliary loss family ([`loss`]), corpus
//! and lexicon tooling with a synthetic generator ([`corpus`]), an Adam
//! training loop ([`train`]), and an experiment matrix runner with
//! statistical reporting ([`experiment`], [`stats`], [`report`]).
//!
//! Batch work parallelizes across instances with rayon when the default
//! `parallel` feature is enabled; results are bit-identical to the
//! sequential fallback because reductions always run in instance order.

pub mod corpus;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod model;
pub mod par;
pub mod report;
pub mod salience;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
