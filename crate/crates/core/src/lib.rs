//! Passage re-ranking with a compact cross-encoder: BM25 candidate generation,
//! point-wise and pair-wise learning-to-rank heads, chunked passage scoring and
//! IR evaluation.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod ltr;
pub mod model;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod segmentation;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
