//! Core engine: turn semi-structured text (logs, device configurations) into a
//! queryable knowledge graph with a handful of LLM calls.
//!
//! The pipeline samples representative chunks, learns a JSON schema and parser
//! scripts from them, runs the parsers over the full corpus, and answers
//! questions through graph queries, text search, or both.

pub mod config;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod ingest;
pub mod kg;
pub mod llm;
pub mod prompts;
pub mod retrieval;
pub mod run;
pub mod sampling;
pub mod schema;
pub mod script;

mod scalar;

pub use config::Config;
pub use error::{Error, Result};
pub use sampling::{KeywordSet, TermLineMatrix};
pub use scalar::Scalar;

/// Default scalar used across the pipeline.
pub type Real = f64;

pub type TfIdfMatrix = sampling::TfIdfMatrix<Real>;
pub type SampleSelection = sampling::SampleSelection<Real>;
pub type Clustering = sampling::Clustering<Real>;

pub type TfIdfMatrix32 = sampling::TfIdfMatrix<f32>;
pub type SampleSelection32 = sampling::SampleSelection<f32>;
