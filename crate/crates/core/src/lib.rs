//! Evaluation harness for temporal question answering over entity-centric
//! tables: table linearization, perturbation tasks, structured prompting,
//! a cached chat-completion gateway, response analysis, exact-match scoring,
//! fine-tuning data preparation and report generation.

pub mod analyze;
pub mod dataset;
pub mod digest;
pub mod finetune;
pub mod gateway;
pub mod harness;
pub mod linearize;
pub mod perturb;
pub mod prompt;
pub mod report;
pub mod score;
pub mod taxonomy;
