//! Review-aware graph collaborative filtering for top-N recommendation.
//!
//! The pipeline has three stages: content auto-encoders compress precomputed
//! item image/text and review embeddings down to a graph-friendly width,
//! dimension-wise attention over review embeddings initializes user vectors
//! from the items they interacted with, and a light graph convolution
//! propagates user/item embeddings over the bipartite interaction graph,
//! trained with a pairwise BPR objective. An evaluation harness (Recall@K,
//! NDCG@K over the full candidate set), baseline/ablation modes, and a
//! planted-structure synthetic generator round out the toolkit.

pub mod alignment;
pub mod compressor;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod graph;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod user_init;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact `{path}`: run stage `{stage}` first")]
    MissingArtifact { path: String, stage: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
