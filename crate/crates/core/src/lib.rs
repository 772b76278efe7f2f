//! Knowledge-graph question answering via adaptive instruction decoding and
//! breadth-first instruction execution.
//!
//! A question is decoded into a set of instruction vectors, executed against a
//! question-specific KG subgraph by instruction-conditioned message passing,
//! and the instructions are revised across adaptive stages using the reasoning
//! output. Everything is built on a small reverse-mode autodiff tape so the
//! whole model trains end to end with Adam.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kg;
pub mod metaqa;
pub mod model;
pub mod reasoner;
pub mod rng;
pub mod subgraph;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
