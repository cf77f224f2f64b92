//! Dual recurrent classifier for pairs of asynchronous, irregularly sampled
//! event sequences.
//!
//! Each subject carries a labelled clinician sequence (visits) and an
//! unlabelled patient sequence (self-reported answers). Both sequences are
//! embedded by small dense networks, modelled by separate recurrent cells and
//! merged at every visit with the most recent patient output, optionally
//! transformed by windowed attention over previous patient outputs.
//!
//! Module map:
//!
//! - [`nn`]: dense layers, activations, dropout, L2, flat parameter vectors and
//!   the finite-difference gradient oracle.
//! - [`data`]: records, alignment, length buckets and cohort JSONL I/O.
//! - [`synth`]: planted-signal cohort generator.
//! - [`recurrent`]: recurrent cell, BPTT and the initial-state network.
//! - [`attention`]: windowed attention block.
//! - [`model`]: the assembled classifier, its loss, gradients and checkpoints.
//! - [`train`]: optimiser, stratified folds, metrics and reports.
//! - [`baselines`]: logistic regression and feed-forward baselines.
//! - [`interpret`]: feature relevance, latent export and exact t-SNE.

pub mod attention;
pub mod baselines;
pub mod config;
pub mod data;
mod error;
pub mod interpret;
pub mod model;
pub mod nn;
pub mod recurrent;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
