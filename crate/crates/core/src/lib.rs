//! API-name completion from a natural-language query and a known API prefix.
//!
//! The pipeline masks trailing words of fully-qualified API names to build
//! prompts, trains a small encoder-decoder transformer on `prompt <sep>
//! query -> api`, optionally augments each step with embedding-space
//! adversarial examples, decodes with beam search and scores with EM@k, MRR
//! and MAP.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advaug;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod float;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use float::Float;

pub use advaug::{AdvConfig, AdvMethod};
pub use corpus::QueryApiPair;
pub use decoder::{ApiLibrary, Candidate, DecodeOptions};
pub use metrics::{EvalItem, EvalReport};
pub use model::{Example, ModelConfig, Params};
pub use pipeline::RunConfig;
pub use tokenizer::{TokenSeq, Vocab};
pub use trainer::{TrainConfig, TrainReport};
