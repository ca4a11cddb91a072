//! Dynamic strategy-chain prompting for long counseling-text generation.
//!
//! The pipeline: ingest and preprocess an annotated counseling corpus
//! ([`corpus`]), learn question-conditioned strategy chains ([`chainmodel`]),
//! render method-specific prompts and parse structured replies
//! ([`promptkit`]), dispatch prompts to a backend ([`llmclient`]), and score
//! the generated replies ([`metrics`]) in stratified experiment runs
//! ([`harness`]).

pub mod chainmodel;
pub mod corpus;
pub mod harness;
pub mod llmclient;
pub mod metrics;
pub mod promptkit;
pub mod seed;
