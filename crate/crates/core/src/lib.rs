//! Knowledge tracing over tutoring dialogues: corpus handling, KC
//! taxonomies, LLM annotation, BKT/DKT/LLM-based tracers and evaluation.

pub mod annotator;
pub mod autodiff;
pub mod bkt;
pub mod config;
pub mod corpus;
pub mod dkt_sem;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kt;
pub mod llmkt;
pub mod synthetic;
pub mod taxonomy;

pub use error::{Error, Result};
