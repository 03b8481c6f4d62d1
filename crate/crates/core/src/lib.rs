//! Discontinuity-aware tagging of verbal multiword expressions.
//!
//! A sentence arrives as a `.cupt` block (CoNLL-U plus an MWE column). Its
//! dependency tree becomes three adjacency matrices for a graph convolution,
//! while a CNN front-end feeds multi-head self-attention; the two branches
//! are merged by highway gating and read out by a BiLSTM over BIGO tags
//! (`G` marks tokens inside an expression's gap).
//!
//! - [`corpus`]: cupt ingestion and writing, the BIGO codec, adjacency, vocabulary
//! - [`tensor`]: dense tensors with reverse-mode autodiff and a gradient checker
//! - [`layers`]: GCN, attention, highway, BiLSTM and CNN building blocks
//! - [`models`]: the four tagger architectures
//! - [`training`]: Adam, the epoch loop with early stopping, synthetic data
//! - [`evaluation`]: MWE-based and token-based scores, gap-size reports

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
