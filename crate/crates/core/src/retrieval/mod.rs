//! Exact dense retrieval, ranking metrics, and latency accounting.
//!
//! Documents and queries are identified by strings, as in BEIR-layout
//! files. Scores are cosine similarities; rankings break score ties by
//! ascending document id so results never depend on insertion order.

mod beir;
mod index;
mod metrics;
mod timing;

pub use beir::{
    document_text, read_corpus, read_qrels, read_queries, read_run, write_qrels, write_run, CorpusDoc, QueryRecord,
};
pub use index::{build_index, search, search_batch, Hit, Index, RankedList};
pub use metrics::{ndcg_at_k, recall_at_k, Qrels, RankingScore};
pub use timing::{timed_run, timed_run_text, TimingReport};

use thiserror::Error;

use crate::container::ContainerError;
use crate::encoder::EncoderError;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: index has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("vector `{0}` has zero norm")]
    ZeroVector(String),
    #[error("vector `{0}` has non-finite entries")]
    NonFinite(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no runs to evaluate")]
    NoRuns,
    #[error("duplicate run for query `{0}`")]
    DuplicateQuery(String),
    #[error("query `{0}` has no relevance judgments")]
    MissingQrels(String),
    #[error("no evaluated query has a relevant document")]
    NoRelevant,
    #[error("{input} is empty")]
    EmptyInput { input: &'static str },
    #[error("{file} line {line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
