//! Attribute-gated multiplicative log-bilinear language model.
//!
//! Words are held in a factored three-way tensor whose slices are mixed by
//! learned attribute vectors (books, languages, sentence ids, POS tags,
//! author metadata). The crate covers corpus encoding, exact-gradient SGD
//! training, unseen-attribute inference, cross-lingual ranking, conditional
//! generation and similarity queries, downstream feature evaluation, and a
//! versioned binary snapshot format behind the `mlbl` CLI.

pub mod corpus;
pub mod error;
pub mod model;
pub mod train;

pub use error::{Error, Result};
