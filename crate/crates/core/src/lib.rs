//! Sentence-level context refinement for retrieval-augmented QA.
//!
//! Pipeline: [`corpus`] retrieves passages with BM25, [`segment`] splits them
//! into sentences, a [`score::Scorer`] rates each sentence against the query,
//! [`refine`] keeps the sentences at or above a threshold and restores their
//! original order, and [`eval`] prompts a reader and measures the result.
//! [`calibrate`] picks thresholds from score distributions.

pub mod calibrate;
pub mod corpus;
pub mod eval;
pub mod reader;
pub mod reference;
pub mod refine;
pub mod remote;
pub mod rng;
pub mod score;
pub mod segment;
pub mod tokens;
