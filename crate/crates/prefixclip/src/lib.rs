//! Dual-encoder contrastive pretraining with dataset-prefix conditioning.
//!
//! The library trains a small text transformer and a small vision transformer
//! into a shared embedding space using either a symmetric image-text
//! contrastive objective or its multi-positive generalization for label data.
//! Every training sequence can carry a learned prefix token that identifies
//! the data source (label prompts vs. free-form captions), and the same
//! prefix is selectable at evaluation time to pick which "mode" of the
//! shared space a query should use.
//!
//! Everything is self-contained: a reverse-mode autodiff tensor engine over
//! `f64`, the optimizer, the tokenizer, procedural dataset synthesis, the
//! trainer, and the evaluation suite live in this crate.

mod blocks;
pub mod check;
pub mod data;
pub mod eval;
pub mod image;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vocab;
