//! Guiding-question learning and coarse-to-fine anomaly scoring for frozen
//! vision-language models.
//!
//! - [`manifest`]: dataset manifests, ground truth, question and score files
//! - [`sampler`]: frame sampling for training and segment plans for scoring
//! - [`prompting`]: learner and optimizer prompts and reply parsing
//! - [`gateway`]: chat and embedding backends, over HTTP or simulated
//! - [`trainer`]: the question optimization loop
//! - [`scorer`]: segment verdicts to frame-level scores
//! - [`evaluator`]: ROC AUC and average precision
//! - [`synthetic`]: seeded benchmarks for the simulated backends

pub mod evaluator;
pub mod gateway;
pub mod manifest;
pub mod parallel;
pub mod prompting;
pub mod sampler;
pub mod scorer;
pub mod synthetic;
pub mod trainer;

mod digest;

pub use digest::{digest_hex, seed_from};
