//! Readers and writers for every pipeline artifact.
//!
//! Record streams (proposals, tracks, annotations) are newline-delimited JSON
//! with a `{"schema_version": N, "kind": ...}` header on line 1. Embeddings
//! are a little-endian binary matrix. Assignments, sweep curves and the
//! condensed tree are CSV with a header row.

mod annotations;
mod csv_tables;
mod embeddings;
mod ndjson;
mod proposals;
mod tracks;

pub use annotations::{read_annotations, read_annotations_from, write_annotations, AnnotationRecord, GtLabel};
pub use csv_tables::{
    read_assignment, read_sweep, write_assignment, write_condensed_tree, write_sweep,
};
pub use embeddings::{
    read_embeddings, read_embeddings_from, write_embeddings, write_embeddings_to, EmbeddingMatrix, EmbeddingReader,
    EMBEDDING_MAGIC,
};
pub use ndjson::{NdjsonReader, NdjsonWriter, SCHEMA_VERSION};
pub use proposals::{
    read_proposals, read_proposals_from, write_proposals, FrameGroup, ProposalRecord, ProposalSet,
};
pub use tracks::{read_tracks, read_tracks_from, write_tracks, write_tracks_to};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: embedding_index {index} out of range (embedding count {count})")]
    IndexOutOfRange { line: usize, index: u64, count: usize },
    #[error("line {line}: embedding_index {index} used by more than one proposal")]
    DuplicateIndex { line: usize, index: u64 },
    #[error("bad magic: not an embedding matrix file")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("non-finite embedding value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("unsupported schema version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u64, supported: u64 },
    #[error("{0}")]
    Schema(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
