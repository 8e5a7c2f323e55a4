//! Dataset ingestion, window construction, clip aggregation, narration
//! embedding and cross-domain sequence mixing.

mod annotations;
mod clips;
mod seqmix;
mod store;
mod text;
mod windows;

use std::path::PathBuf;

use thiserror::Error;

pub use annotations::{
    annotation_rows, import_annotations, parse_annotations, read_annotations, AnnotationRow, ImportSpec,
};
pub use clips::{
    aggregate_clips, eval_clip_indices, relational_summary, sample_clip_indices, visual_rows,
    ClipReduce,
};
pub use seqmix::{seqmix, SeqMixPool, SeqMixStats};
pub use store::{
    ActionRecord, DatasetSplit, DomainEntry, DomainRole, FeatureStore, Manifest,
    MANIFEST_VERSION,
};
pub use text::NarrationEmbedder;
pub use windows::{build_windows, SequenceWindow};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}, line {line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },
    #[error("invalid dataset:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("video {0} has no actions")]
    EmptyVideo(String),
    #[error("window length must be odd, got {0}")]
    EvenWindow(usize),
    #[error("token id {token} outside vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("action {action}: expected {expected} clips, store has {got}")]
    ClipCount {
        action: usize,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    Shape(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}
