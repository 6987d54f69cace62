//! Engine for turning static visual-question-answering benchmarks into
//! judge-verified dynamic variants, measuring benchmark contamination and
//! scoring vision-language models on the results.

pub mod benchio;
pub mod clients;
pub mod composer;
pub mod config;
pub mod contamination;
pub mod eval;
pub mod fixture;
pub mod generate;
pub mod index;
pub mod judge;
pub mod lang;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod store;
pub mod vision;

pub use index::{EmbeddingIndex, EmbeddingVector, Scalar};

pub type EmbeddingVectorF32 = EmbeddingVector<f32>;
pub type EmbeddingVectorF64 = EmbeddingVector<f64>;
pub type EmbeddingIndexF32 = EmbeddingIndex<f32>;
pub type EmbeddingIndexF64 = EmbeddingIndex<f64>;
