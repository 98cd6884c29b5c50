//! Graph-informed multi-document abstractive summarization.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`text`]: tokenization, paragraph splitting, vocabulary, corpus files
//! - [`graph`]: similarity / topic / discourse paragraph-relation matrices
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff
//! - [`model`]: hierarchical encoder with graph-informed self-attention and
//!   a decoder with hierarchical graph attention
//! - [`training`]: label-smoothed MLE with Noam schedule, Adam, checkpoints
//! - [`inference`]: beam search with length penalty and trigram blocking
//! - [`evaluation`]: ROUGE-1/2/L and the Lead baseline
//!
//! The `graphsum` binary exposes the pipeline as `build-graph`, `train`,
//! `summarize` and `evaluate` subcommands.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod model;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
