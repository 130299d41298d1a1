//! Probabilistic autoregressive sequence models and the tooling needed to
//! measure their uncertainty calibration.
//!
//! The crate is organised bottom-up:
//!
//! - [`rng`]: the portable, splittable PRNG every stochastic step draws from.
//! - [`corpus`]: vocabularies, synthetic tasks, and the corpus JSONL format.
//! - [`model`]: the conditional sequence model with its probabilistic heads
//!   (MC dropout, batch ensemble, SNGP, deep ensembles) and hand-written
//!   backpropagation.
//! - [`inference`]: posterior-mean distributions, beam decoding, uncertainty
//!   scores, and the prediction JSONL format.
//! - [`rouge`]: token-level ROUGE-1/2/L.
//! - [`calib`]: ECE, Spearman correlation with bootstrap spread, ROC-AUC, and
//!   quality-vs-abstention curves.

pub mod calib;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod rouge;

pub use error::{Error, Result};
