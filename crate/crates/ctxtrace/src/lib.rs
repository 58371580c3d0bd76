//! Context traceback for long-context language models.
//!
//! Given an instruction, a long context split into texts, and a model
//! output, this crate identifies the top-K texts most responsible for that
//! output. The search recursively divides the context into contiguous
//! groups, scores each group with a pluggable perturbation-based attribution
//! method (single-text contribution, leave-one-out, Monte-Carlo Shapley with
//! top-β denoising, or a sparse linear surrogate), keeps the K
//! highest-scoring groups, and recurses until the survivors are single
//! texts. Scores from several methods can be ensembled by a scaled
//! per-text maximum.
//!
//! The value of a text subset comes from one of three backends: per-token
//! log-probabilities of the output from an OpenAI-compatible server, BLEU
//! between the output and a regeneration, or a deterministic game oracle
//! (unanimity / existence) used for testing and verification.
//!
//! Start with the `examples/` directory: each example is a runnable
//! walkthrough of one capability. The `ctxtrace` binary fronts the same
//! library for scripting: `trace`, `evaluate`, `inject`, and `segment`
//! subcommands.

pub mod attribution;
pub mod cli;
pub mod corpus;
pub mod doc;
pub mod error;
pub mod harness;
pub mod llm;
pub mod search;
pub mod value;

pub use error::{Error, Result};
