//! Downstream benchmark metrics and the files they are computed from.

mod iob;
mod qa;
mod report;
mod stats;

pub use iob::{entity_f1, parse_iob, read_iob, EntityScores, IobDocument, Span, Tag};
pub use qa::{normalize_answer, qa_exact_match, qa_f1, read_qa_json, QaExample};
pub use report::{micro_macro, DatasetScore, MetricReport};
pub use stats::{accuracy, mean_sd, pearson, read_sts_tsv, StsPair};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("document {doc}: {message}")]
    Misaligned { doc: usize, message: String },
    #[error("length mismatch: {pred} predictions for {gold} gold items")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("need at least {needed} values, got {found}")]
    TooFew { needed: usize, found: usize },
    #[error("{0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no scores to aggregate")]
    Empty,
    #[error("task `{0}` has no datasets")]
    EmptyTask(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}
