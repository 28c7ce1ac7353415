//! Multi-turn legal consultation RAG: query rewriting, legal literature
//! filtering, hybrid BM25 + dense retrieval, article filtering, reranking,
//! grounded generation and composite scoring.

pub mod analyzer;
mod binfmt;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dense_index;
pub mod error;
pub mod evaluator;
pub mod http;
pub mod llm_gateway;
pub mod pipeline;
pub mod rerank;
pub mod sparse_index;
pub mod stages;

pub use error::{Error, Result};
