//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmError {
    /// Invalid configuration (bad flag combinations, impossible synthesis
    /// ranges, missing paths).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch; reports both offending shapes.
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// An operation received an empty sequence it cannot handle.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A vector norm fell below the cosine-similarity epsilon.
    #[error("degenerate embedding: norm {norm:.3e} below {eps:.1e}")]
    DegenerateEmbedding { norm: f64, eps: f64 },

    /// Interval with start >= end where a proper interval is required.
    #[error("degenerate interval [{start}, {end}]")]
    DegenerateInterval { start: f64, end: f64 },

    /// NaN or Inf surfaced in a value that must stay finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Dataset content failed validation; names the offending record.
    #[error("invalid data ({record}): {reason}")]
    Validation { record: String, reason: String },

    /// Unknown parameter name in a store or checkpoint.
    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    /// Not enough negative candidates to draw the requested sample.
    #[error("too few negative candidates: have {have}, need {need}")]
    TooFewCandidates { have: usize, need: usize },

    /// More ground-truth moments than decoder queries.
    #[error("assignment infeasible: {gt} ground truths exceed {queries} queries")]
    GtExceedsQueries { gt: usize, queries: usize },

    /// Evaluation flags claim more true positives than ground truths.
    #[error("flag list has {tp} true positives but only {gt} ground truths")]
    TpExceedsGt { tp: usize, gt: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DmError>;
