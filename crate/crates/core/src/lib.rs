//! Harmonizes prescription exports from heterogeneous clinic systems into one
//! schema, computes medication-for-opioid-use-disorder (MOUD) days, and scores
//! extraction output against ground truth.

pub mod config;
pub mod error;
pub mod evaluator;
pub mod extraction;
pub mod moud;
pub mod names;
pub mod pipeline;
pub mod postprocess;
pub mod schema;
pub mod sig;
pub mod synth;

pub use error::{Error, Result};
