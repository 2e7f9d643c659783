//! A desk-scale multilingual decoder language model with its measurement
//! instruments built in.
//!
//! The crate trains small byte-level BPE tokenizers and decoder-only
//! transformers entirely in f64 with hand-written backpropagation, then turns
//! the same machinery on itself: per-neuron importance profiling by exact
//! ablation and by a first-order Taylor approximation, and cross-language
//! representation similarity over the layer stack.
//!
//! Everything is deterministic. One seed fixes initialization, data order,
//! and synthetic corpora; reductions run in a fixed order regardless of the
//! worker count, so repeated runs are bit-identical.

pub mod array;
pub mod corpus;
pub mod error;
pub mod fsio;
pub mod model;
pub mod profiler;
pub mod repr;
pub mod tokenizer;
pub mod training;

pub use array::Array;
pub use error::{Error, Result};
pub use model::{ModelConfig, Parameters};
pub use tokenizer::Tokenizer;
